//! Two-tower transformer classifier hosting the adapters.
//!
//! Both towers are pre-norm transformers with frozen weights. Vision input
//! is a `seq × f_v` feature matrix projected to the tower width; text input
//! is a token sequence with a leading CLS token. Each tower mean-pools its
//! final tokens and projects into a shared `d_e`-dimensional space; the
//! classifier sees the concatenation of both embeddings.
//!
//! A missing image becomes an all-ones feature matrix and missing text
//! becomes the lone CLS token.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    init_adapter_pair, merge, site_layout, AdapterCheckpoint, AdapterConfig, AdapterSet, BoundPair, MatrixKind,
    MergeProvenance, Side,
};
use crate::autodiff::{Tape, Var};
use crate::codec::{self, FORMAT_VERSION};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Token id standing for an empty text.
pub const CLS_TOKEN: u32 = 0;

const LN_EPS: f64 = 1e-5;
const CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Multiclass,
    Multilabel,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn vision_default() -> Self {
        Self {
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_seq_len: 16,
        }
    }

    pub fn text_default() -> Self {
        Self {
            width: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_seq_len: 12,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{name} encoder: {m}")));
        if self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.max_seq_len == 0 {
            return err("width, heads, mlp_ratio and max_seq_len must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return err(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
    /// Columns of the vision feature matrix (f_v).
    pub vision_features: usize,
    pub vocab_size: usize,
    /// Shared embedding width d_e.
    pub embed_dim: usize,
    pub classes: usize,
    pub task: Task,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: EncoderConfig::vision_default(),
            text: EncoderConfig::text_default(),
            vision_features: 16,
            vocab_size: 256,
            embed_dim: 32,
            classes: 4,
            task: Task::Multiclass,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate("vision")?;
        self.text.validate("text")?;
        if self.vision_features == 0 || self.vocab_size < 2 || self.embed_dim == 0 {
            return Err(Error::Config("vision_features, vocab_size and embed_dim must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.task == Task::Binary && self.classes != 2 {
            return Err(Error::Config("binary task needs exactly 2 classes".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, side: Side) -> &EncoderConfig {
        match side {
            Side::Vision => &self.vision,
            Side::Text => &self.text,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerWeights {
    fn random<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Tensor::randn(d, d, std, rng),
            w_k: Tensor::randn(d, d, std, rng),
            w_v: Tensor::randn(d, d, std, rng),
            w_o: Tensor::randn(d, d, std, rng),
            mlp_in: Tensor::randn(d, hidden, std, rng),
            mlp_in_bias: Tensor::zeros(1, hidden),
            mlp_out: Tensor::randn(hidden, d, 1.0 / (hidden as f64).sqrt(), rng),
            mlp_out_bias: Tensor::zeros(1, d),
            ln1_gain: Tensor::ones(1, d),
            ln1_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::ones(1, d),
            ln2_bias: Tensor::zeros(1, d),
        }
    }

    pub fn get(&self, kind: MatrixKind) -> &Tensor {
        match kind {
            MatrixKind::Q => &self.w_q,
            MatrixKind::K => &self.w_k,
            MatrixKind::V => &self.w_v,
            MatrixKind::O => &self.w_o,
        }
    }

    fn get_mut(&mut self, kind: MatrixKind) -> &mut Tensor {
        match kind {
            MatrixKind::Q => &mut self.w_q,
            MatrixKind::K => &mut self.w_k,
            MatrixKind::V => &mut self.w_v,
            MatrixKind::O => &mut self.w_o,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("mlp_in", &self.mlp_in),
            ("mlp_in_bias", &self.mlp_in_bias),
            ("mlp_out", &self.mlp_out),
            ("mlp_out_bias", &self.mlp_out_bias),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn check(&self, d: usize, hidden: usize) -> bool {
        let expect = [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, hidden),
            (1, hidden),
            (hidden, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        self.named().iter().zip(expect).all(|((_, t), s)| t.shape() == s)
    }
}

/// Frozen weights of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    /// f_v×d feature projection (vision) or vocab×d embedding table (text).
    pub input: Tensor,
    pub positions: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// d×d_e.
    pub projection: Tensor,
}

impl Tower {
    fn random<R: Rng>(cfg: &EncoderConfig, input_rows: usize, input_std: f64, d_e: usize, rng: &mut R) -> Self {
        let d = cfg.width;
        let input = Tensor::randn(input_rows, d, input_std, rng);
        let positions = Tensor::randn(cfg.max_seq_len, d, 0.1, rng);
        let layers = (0..cfg.depth)
            .map(|_| LayerWeights::random(d, d * cfg.mlp_ratio, rng))
            .collect();
        let projection = Tensor::randn(d, d_e, 1.0 / (d as f64).sqrt(), rng);
        Self {
            input,
            positions,
            layers,
            final_gain: Tensor::ones(1, d),
            final_bias: Tensor::zeros(1, d),
            projection,
        }
    }

    fn check(&self, cfg: &EncoderConfig, input_rows: usize, d_e: usize) -> bool {
        let d = cfg.width;
        self.input.shape() == (input_rows, d)
            && self.positions.shape() == (cfg.max_seq_len, d)
            && self.layers.len() == cfg.depth
            && self.layers.iter().all(|l| l.check(d, d * cfg.mlp_ratio))
            && self.final_gain.shape() == (1, d)
            && self.final_bias.shape() == (1, d)
            && self.projection.shape() == (d, d_e)
    }

    fn named<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = vec![
            (format!("{prefix}.input"), &self.input),
            (format!("{prefix}.positions"), &self.positions),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.named() {
                out.push((format!("{prefix}.layer{i}.{n}"), t));
            }
        }
        out.push((format!("{prefix}.final_gain"), &self.final_gain));
        out.push((format!("{prefix}.final_bias"), &self.final_bias));
        out.push((format!("{prefix}.projection"), &self.projection));
        out
    }
}

type Overrides = HashMap<(Side, usize, MatrixKind), Var>;

fn block(
    tape: &Tape,
    x: Var,
    layer: &LayerWeights,
    weight: impl Fn(MatrixKind) -> Var,
    segments: &[usize],
    heads: usize,
) -> Result<Var> {
    let c = |t: &Tensor| tape.constant(t.clone());
    let h = tape.layer_norm(x, c(&layer.ln1_gain), c(&layer.ln1_bias), LN_EPS)?;
    let q = tape.matmul(h, weight(MatrixKind::Q))?;
    let k = tape.matmul(h, weight(MatrixKind::K))?;
    let v = tape.matmul(h, weight(MatrixKind::V))?;
    let a = tape.attention(q, k, v, segments, heads)?;
    let x = tape.add(x, tape.matmul(a, weight(MatrixKind::O))?)?;
    let h = tape.layer_norm(x, c(&layer.ln2_gain), c(&layer.ln2_bias), LN_EPS)?;
    let m = tape.add_row(tape.matmul(h, c(&layer.mlp_in))?, c(&layer.mlp_in_bias))?;
    let m = tape.gelu(m);
    let m = tape.add_row(tape.matmul(m, c(&layer.mlp_out))?, c(&layer.mlp_out_bias))?;
    tape.add(x, m)
}

/// One pre-norm transformer block on a single sequence. `overrides`
/// replaces the listed attention matrices.
pub fn attention_forward(
    x: &Tensor,
    layer: &LayerWeights,
    overrides: &BTreeMap<MatrixKind, Tensor>,
    heads: usize,
) -> Result<Tensor> {
    let d = layer.w_q.rows();
    if x.cols() != d {
        return Err(Error::Dimension {
            op: "attention_forward",
            lhs: x.shape(),
            rhs: layer.w_q.shape(),
        });
    }
    for (kind, w) in overrides {
        if w.shape() != (d, d) {
            return Err(Error::Dimension {
                op: "attention_forward override",
                lhs: w.shape(),
                rhs: layer.get(*kind).shape(),
            });
        }
    }
    let tape = Tape::new();
    let weights: HashMap<MatrixKind, Var> = [MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O]
        .into_iter()
        .map(|k| (k, tape.constant(overrides.get(&k).unwrap_or(layer.get(k)).clone())))
        .collect();
    let input = tape.constant(x.clone());
    let out = block(&tape, input, layer, |k| weights[&k], &[x.rows()], heads)?;
    Ok(tape.value(out).as_ref().clone())
}

/// Hidden states entering the first adapted layer of each tower.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub vision: Tensor,
    pub text: Tensor,
}

/// Trainable parameters registered on a tape.
pub struct BoundModel {
    /// Leaves in [`DualEncoderModel::params`] order.
    pub vars: Vec<Var>,
    head_weight: Var,
    head_bias: Var,
    overrides: Overrides,
}

/// Tape outputs of a batched forward pass.
pub struct ForwardOutput {
    pub vision_embedding: Var,
    pub text_embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    pub config: ModelConfig,
    pub vision: Tower,
    pub text: Tower,
    /// (2·d_e)×C.
    pub head_weight: Tensor,
    /// 1×C.
    pub head_bias: Tensor,
    pub adapters: Option<AdapterSet>,
    pub merged: bool,
    pub merges: Vec<MergeProvenance>,
}

impl DualEncoderModel {
    /// Random frozen towers and a fresh head; no adapters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d_e = config.embed_dim;
        let vision = Tower::random(
            &config.vision,
            config.vision_features,
            1.0 / (config.vision_features as f64).sqrt(),
            d_e,
            &mut seed::derived_rng(seed, "vision_tower", 0),
        );
        let text = Tower::random(
            &config.text,
            config.vocab_size,
            1.0,
            d_e,
            &mut seed::derived_rng(seed, "text_tower", 0),
        );
        let fan = (2 * d_e + config.classes) as f64;
        let head_weight = Tensor::uniform(
            2 * d_e,
            config.classes,
            (6.0 / fan).sqrt(),
            &mut seed::derived_rng(seed, "head", 0),
        );
        let head_bias = Tensor::zeros(1, config.classes);
        Ok(Self {
            config,
            vision,
            text,
            head_weight,
            head_bias,
            adapters: None,
            merged: false,
            merges: Vec::new(),
        })
    }

    pub fn tower(&self, side: Side) -> &Tower {
        match side {
            Side::Vision => &self.vision,
            Side::Text => &self.text,
        }
    }

    fn tower_mut(&mut self, side: Side) -> &mut Tower {
        match side {
            Side::Vision => &mut self.vision,
            Side::Text => &mut self.text,
        }
    }

    /// Attaches fresh adapters, replacing any existing ones.
    pub fn attach(&mut self, config: AdapterConfig, seed: u64) -> Result<()> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let (v, t) = (&self.config.vision, &self.config.text);
        config.validate(v.width, t.width, v.depth, t.depth)?;
        let mut pairs = Vec::new();
        for site in site_layout(&config, v.depth, t.depth)? {
            let w0_v = self.vision.layers[site.vision_layer].get(site.kind);
            let w0_t = self.text.layers[site.text_layer].get(site.kind);
            let pair_seed = seed::derive_seed(seed, "adapter", site.index as u64);
            pairs.push(init_adapter_pair(&config, site, w0_v, w0_t, pair_seed)?);
        }
        self.adapters = Some(AdapterSet { config, pairs });
        Ok(())
    }

    /// The frozen model: same towers, no adapters.
    pub fn base(&self) -> Self {
        Self {
            adapters: None,
            ..self.clone()
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("head.W".to_string(), &self.head_weight), ("head.b".to_string(), &self.head_bias)];
        if let Some(a) = &self.adapters {
            out.extend(a.params());
        }
        out
    }

    /// Same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.head_weight, &mut self.head_bias];
        if let Some(a) = &mut self.adapters {
            out.extend(a.params_mut());
        }
        out
    }

    /// Learnable scalars: adapters plus classifier head.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vision.named("vision");
        out.extend(self.text.named("text"));
        out
    }

    pub fn frozen_checksum(&self) -> String {
        let t = self.frozen_tensors();
        codec::checksum(t.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Index of the first layer whose weights depend on trainable parameters.
    pub fn boundary(&self, side: Side) -> usize {
        let depth = self.config.encoder(side).depth;
        self.adapters
            .iter()
            .flat_map(|a| a.pairs.iter().map(move |p| p.site.layer(side)))
            .min()
            .unwrap_or(depth)
    }

    fn vision_payload<'a>(&self, r: &'a SampleRecord) -> Result<Cow<'a, Tensor>> {
        let cfg = &self.config;
        if !r.mask.has_vision() {
            return Ok(Cow::Owned(Tensor::ones(cfg.vision.max_seq_len, cfg.vision_features)));
        }
        let v = r
            .vision
            .as_ref()
            .ok_or_else(|| Error::InvalidSample(format!("record {} lacks its vision payload", r.id)))?;
        if v.cols() != cfg.vision_features || v.rows() > cfg.vision.max_seq_len {
            return Err(Error::InvalidSample(format!(
                "record {}: vision payload {:?} does not fit {} features × {} tokens",
                r.id,
                v.shape(),
                cfg.vision_features,
                cfg.vision.max_seq_len
            )));
        }
        Ok(Cow::Borrowed(v))
    }

    fn text_tokens(&self, r: &SampleRecord) -> Result<Vec<u32>> {
        let cfg = &self.config;
        let mut tokens = vec![CLS_TOKEN];
        if r.mask.has_text() {
            let t = r
                .text
                .as_ref()
                .ok_or_else(|| Error::InvalidSample(format!("record {} lacks its text payload", r.id)))?;
            tokens.extend_from_slice(t);
        }
        if tokens.len() > cfg.text.max_seq_len {
            return Err(Error::InvalidSample(format!(
                "record {}: {} tokens exceed max_seq_len {}",
                r.id,
                tokens.len(),
                cfg.text.max_seq_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidSample(format!("record {}: token {bad} outside vocabulary", r.id)));
        }
        Ok(tokens)
    }

    fn embed(&self, r: &SampleRecord) -> Result<(Tensor, Tensor)> {
        if !r.mask.has_vision() && !r.mask.has_text() {
            return Err(Error::InvalidSample(format!("record {} has no modality", r.id)));
        }
        let v = self.vision_payload(r)?;
        let mut xv = v.matmul(&self.vision.input)?;
        xv.add_assign(&self.vision.positions.slice_rows(0, v.rows()));

        let tokens = self.text_tokens(r)?;
        let d = self.config.text.width;
        let mut xt = Vec::with_capacity(tokens.len() * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            let e = self.text.input.row(tok as usize);
            let p = self.text.positions.row(pos);
            xt.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok((xv, Tensor::from_raw(tokens.len(), d, xt)))
    }

    fn run_layers(
        &self,
        tape: &Tape,
        side: Side,
        x: Var,
        segments: &[usize],
        layers: std::ops::Range<usize>,
        overrides: &Overrides,
    ) -> Result<Var> {
        let tower = self.tower(side);
        let heads = self.config.encoder(side).heads;
        let mut x = x;
        for l in layers {
            let layer = &tower.layers[l];
            let weights: HashMap<MatrixKind, Var> = [MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O]
                .into_iter()
                .map(|k| {
                    let v = overrides
                        .get(&(side, l, k))
                        .copied()
                        .unwrap_or_else(|| tape.constant(layer.get(k).clone()));
                    (k, v)
                })
                .collect();
            x = block(tape, x, layer, |k| weights[&k], segments, heads)?;
        }
        Ok(x)
    }

    /// Runs the frozen prefix of both towers for each record.
    pub fn prepare(&self, records: &[SampleRecord]) -> Result<Vec<Prepared>> {
        let (bv, bt) = (self.boundary(Side::Vision), self.boundary(Side::Text));
        let none = Overrides::new();
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let embedded = chunk.iter().map(|r| self.embed(r)).collect::<Result<Vec<_>>>()?;
            let mut sides = Vec::new();
            for (side, boundary) in [(Side::Vision, bv), (Side::Text, bt)] {
                let parts: Vec<&Tensor> = embedded
                    .iter()
                    .map(|(v, t)| if side == Side::Vision { v } else { t })
                    .collect();
                let segments: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
                let stacked = Tensor::vstack(&parts)?;
                let hidden = if boundary == 0 {
                    stacked
                } else {
                    let tape = Tape::new();
                    let x = tape.constant(stacked);
                    let y = self.run_layers(&tape, side, x, &segments, 0..boundary, &none)?;
                    tape.value(y).as_ref().clone()
                };
                let mut offset = 0;
                let split: Vec<Tensor> = segments
                    .iter()
                    .map(|&len| {
                        let t = hidden.slice_rows(offset, offset + len);
                        offset += len;
                        t
                    })
                    .collect();
                sides.push(split);
            }
            let text = sides.pop().unwrap_or_default();
            let vision = sides.pop().unwrap_or_default();
            out.extend(vision.into_iter().zip(text).map(|(vision, text)| Prepared { vision, text }));
        }
        Ok(out)
    }

    /// Registers head and adapter parameters as leaves and builds the
    /// adapted weights of every attachment site.
    pub fn bind(&self, tape: &Tape) -> Result<BoundModel> {
        let mut vars = Vec::new();
        let head_weight = tape.leaf(self.head_weight.clone());
        let head_bias = tape.leaf(self.head_bias.clone());
        vars.push(head_weight);
        vars.push(head_bias);
        let mut overrides = Overrides::new();
        if let Some(set) = &self.adapters {
            let bound: Vec<BoundPair> = set.pairs.iter().map(|p| p.bind(tape, &mut vars)).collect();
            for (pair, b) in set.pairs.iter().zip(&bound) {
                for side in [Side::Vision, Side::Text] {
                    let w = pair.effective_weight_on(tape, b, side)?;
                    overrides.insert((side, pair.site.layer(side), pair.site.kind), w);
                }
            }
        }
        Ok(BoundModel {
            vars,
            head_weight,
            head_bias,
            overrides,
        })
    }

    fn finish_tower(&self, tape: &Tape, side: Side, parts: &[&Tensor], bound: &BoundModel) -> Result<Var> {
        let tower = self.tower(side);
        let segments: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        let x = tape.constant(Tensor::vstack(parts)?);
        let depth = self.config.encoder(side).depth;
        let x = self.run_layers(tape, side, x, &segments, self.boundary(side)..depth, &bound.overrides)?;
        let c = |t: &Tensor| tape.constant(t.clone());
        let x = tape.layer_norm(x, c(&tower.final_gain), c(&tower.final_bias), LN_EPS)?;
        let pooled = tape.segment_mean(x, &segments)?;
        tape.matmul(pooled, c(&tower.projection))
    }

    /// Batched forward from prepared hidden states.
    pub fn forward_prepared(&self, tape: &Tape, bound: &BoundModel, batch: &[&Prepared]) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let pv: Vec<&Tensor> = batch.iter().map(|p| &p.vision).collect();
        let pt: Vec<&Tensor> = batch.iter().map(|p| &p.text).collect();
        let vision_embedding = self.finish_tower(tape, Side::Vision, &pv, bound)?;
        let text_embedding = self.finish_tower(tape, Side::Text, &pt, bound)?;
        let joint = tape.concat_cols(vision_embedding, text_embedding)?;
        let logits = tape.add_row(tape.matmul(joint, bound.head_weight)?, bound.head_bias)?;
        Ok(ForwardOutput {
            vision_embedding,
            text_embedding,
            logits,
        })
    }

    /// Logits and both embeddings for prepared inputs (n×C, n×d_e, n×d_e).
    pub fn evaluate_prepared(&self, prepared: &[Prepared]) -> Result<(Tensor, Tensor, Tensor)> {
        let mut logits = Vec::new();
        let mut ve = Vec::new();
        let mut te = Vec::new();
        for chunk in prepared.chunks(CHUNK) {
            let tape = Tape::new();
            let bound = self.bind(&tape)?;
            let refs: Vec<&Prepared> = chunk.iter().collect();
            let out = self.forward_prepared(&tape, &bound, &refs)?;
            logits.push(tape.value(out.logits).as_ref().clone());
            ve.push(tape.value(out.vision_embedding).as_ref().clone());
            te.push(tape.value(out.text_embedding).as_ref().clone());
        }
        let stack = |parts: Vec<Tensor>| -> Result<Tensor> {
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::vstack(&refs)
        };
        if prepared.is_empty() {
            return Err(Error::Contract("nothing to evaluate".into()));
        }
        Ok((stack(logits)?, stack(ve)?, stack(te)?))
    }

    /// n×C logits.
    pub fn logits(&self, records: &[SampleRecord]) -> Result<Tensor> {
        Ok(self.evaluate_prepared(&self.prepare(records)?)?.0)
    }

    /// Vision and text embeddings (each n×d_e) after placeholder substitution.
    pub fn embeddings(&self, records: &[SampleRecord]) -> Result<(Tensor, Tensor)> {
        let (_, v, t) = self.evaluate_prepared(&self.prepare(records)?)?;
        Ok((v, t))
    }

    /// 1×d_e embedding of one side of a sample.
    pub fn encode(&self, sample: &SampleRecord, side: Side) -> Result<Tensor> {
        let (v, t) = self.embeddings(std::slice::from_ref(sample))?;
        Ok(match side {
            Side::Vision => v,
            Side::Text => t,
        })
    }

    /// `concat(v, t)·W_c + b` for 1×d_e (or n×d_e) embeddings.
    pub fn classify(&self, v_emb: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let d_e = self.config.embed_dim;
        if v_emb.cols() != d_e || t_emb.shape() != v_emb.shape() {
            return Err(Error::Dimension {
                op: "classify",
                lhs: v_emb.shape(),
                rhs: t_emb.shape(),
            });
        }
        let mut joint = Vec::with_capacity(v_emb.rows() * 2 * d_e);
        for r in 0..v_emb.rows() {
            joint.extend_from_slice(v_emb.row(r));
            joint.extend_from_slice(t_emb.row(r));
        }
        let joint = Tensor::from_raw(v_emb.rows(), 2 * d_e, joint);
        let mut out = joint.matmul(&self.head_weight)?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) + self.head_bias.get(0, c));
            }
        }
        Ok(out)
    }

    /// 1×C logits for one sample.
    pub fn model_forward(&self, sample: &SampleRecord) -> Result<Tensor> {
        self.logits(std::slice::from_ref(sample))
    }

    /// Folds every adapter pair into its frozen weights. Each site is
    /// certified on random inputs drawn from `seed`.
    pub fn merge_all(&self, seed: u64) -> Result<DualEncoderModel> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let mut out = self.base();
        out.merged = true;
        let Some(set) = &self.adapters else {
            return Ok(out);
        };
        for pair in &set.pairs {
            for side in [Side::Vision, Side::Text] {
                let d = self.config.encoder(side).width;
                let mut rng = seed::derived_rng(seed, "certify", (pair.site.index * 2 + side as usize) as u64);
                let inputs: Vec<Tensor> = (0..2).map(|_| Tensor::randn(8, d, 1.0, &mut rng)).collect();
                let merged = merge(pair, side, &inputs)?;
                let layer = pair.site.layer(side);
                *out.tower_mut(side).layers[layer].get_mut(pair.site.kind) = merged.weight;
                out.merges.push(merged.provenance);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let adapters = self.adapters.as_ref().map(AdapterSet::to_checkpoint);
        let mut ckpt = ModelCheckpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vision: self.vision.clone(),
            text: self.text.clone(),
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
            adapters,
            merged: self.merged,
            merges: self.merges.clone(),
            checksum: String::new(),
        };
        ckpt.checksum = ckpt.compute_checksum();
        ckpt
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", ckpt.format_version)));
        }
        if ckpt.compute_checksum() != ckpt.checksum {
            return Err(Error::Format("model checksum mismatch".into()));
        }
        let cfg = &ckpt.config;
        cfg.validate()?;
        let d_e = cfg.embed_dim;
        if !ckpt.vision.check(&cfg.vision, cfg.vision_features, d_e)
            || !ckpt.text.check(&cfg.text, cfg.vocab_size, d_e)
            || ckpt.head_weight.shape() != (2 * d_e, cfg.classes)
            || ckpt.head_bias.shape() != (1, cfg.classes)
        {
            return Err(Error::ArchitectureMismatch(
                "checkpoint tensors do not match its model config".into(),
            ));
        }
        let mut model = Self {
            config: cfg.clone(),
            vision: ckpt.vision.clone(),
            text: ckpt.text.clone(),
            head_weight: ckpt.head_weight.clone(),
            head_bias: ckpt.head_bias.clone(),
            adapters: None,
            merged: ckpt.merged,
            merges: ckpt.merges.clone(),
        };
        if let Some(a) = &ckpt.adapters {
            let (v, t) = (&cfg.vision, &cfg.text);
            a.config.validate(v.width, t.width, v.depth, t.depth)?;
            let set = AdapterSet::from_checkpoint(a, |site| {
                let lv = model.vision.layers.get(site.vision_layer);
                let lt = model.text.layers.get(site.text_layer);
                match (lv, lt) {
                    (Some(lv), Some(lt)) => Ok((lv.get(site.kind).clone(), lt.get(site.kind).clone())),
                    _ => Err(Error::ArchitectureMismatch(format!("site {} outside the towers", site.index))),
                }
            })?;
            model.adapters = Some(set);
        }
        Ok(model)
    }
}

/// Full model snapshot: frozen towers, head, adapters and merge history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vision: Tower,
    pub text: Tower,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub adapters: Option<AdapterCheckpoint>,
    pub merged: bool,
    pub merges: Vec<MergeProvenance>,
    pub checksum: String,
}

impl ModelCheckpoint {
    fn compute_checksum(&self) -> String {
        let mut named = self.vision.named("vision");
        named.extend(self.text.named("text"));
        named.push(("head.W".into(), &self.head_weight));
        named.push(("head.b".into(), &self.head_bias));
        let base = codec::checksum(named.iter().map(|(n, t)| (n.as_str(), *t)));
        let adapters = self.adapters.as_ref().map(|a| a.checksum.as_str()).unwrap_or("");
        codec::sha256_hex(format!("{base}:{adapters}").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec, Mask};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vision: EncoderConfig {
                width: 8,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                max_seq_len: 4,
            },
            text: EncoderConfig {
                width: 6,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                max_seq_len: 4,
            },
            vision_features: 3,
            vocab_size: 16,
            embed_dim: 4,
            classes: 3,
            task: Task::Multiclass,
        }
    }

    fn tiny_records(n: usize) -> Vec<SampleRecord> {
        let spec = GeneratorSpec {
            classes: 3,
            samples: n,
            seq_v: 4,
            f_v: 3,
            text_len: 3,
            vocab_size: 16,
            ..GeneratorSpec::default()
        };
        generate(&spec).unwrap()
    }

    #[test]
    fn residual_identity_with_zero_weights() {
        let d = 4;
        let zero = Tensor::zeros(d, d);
        let layer = LayerWeights {
            w_q: zero.clone(),
            w_k: zero.clone(),
            w_v: zero.clone(),
            w_o: zero.clone(),
            mlp_in: Tensor::zeros(d, 8),
            mlp_in_bias: Tensor::zeros(1, 8),
            mlp_out: Tensor::zeros(8, d),
            mlp_out_bias: Tensor::zeros(1, d),
            ln1_gain: Tensor::ones(1, d),
            ln1_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::ones(1, d),
            ln2_bias: Tensor::zeros(1, d),
        };
        let mut rng = seed::rng(1);
        let x = Tensor::randn(3, d, 1.0, &mut rng);
        assert_eq!(attention_forward(&x, &layer, &BTreeMap::new(), 2).unwrap(), x);
    }

    #[test]
    fn single_token_block_by_hand() {
        // One token: attention weight is 1, so the attention output is LN(x)·W_v.
        let d = 2;
        let mut rng = seed::rng(2);
        let mut layer = LayerWeights::random(d, 2, &mut rng);
        layer.mlp_in = Tensor::zeros(d, 2);
        layer.mlp_out = Tensor::zeros(2, d);
        let x = Tensor::from_rows(&[&[1.0, 3.0]]).unwrap();
        // layer norm of [1, 3]: mean 2, variance 1
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        let h = Tensor::from_rows(&[&[-s, s]]).unwrap();
        let expect = x.add(&h.matmul(&layer.w_v).unwrap().matmul(&layer.w_o).unwrap()).unwrap();
        let got = attention_forward(&x, &layer, &BTreeMap::new(), 1).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn classify_by_hand() {
        let mut cfg = tiny_config();
        cfg.embed_dim = 1;
        cfg.classes = 2;
        let mut m = DualEncoderModel::new(cfg, 0).unwrap();
        m.head_weight = Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]]).unwrap();
        m.head_bias = Tensor::from_rows(&[&[0.1, 0.2]]).unwrap();
        let v = Tensor::scalar(3.0);
        let t = Tensor::scalar(-1.0);
        let out = m.classify(&v, &t).unwrap();
        assert_eq!(out, Tensor::from_rows(&[&[3.0 - 2.0 + 0.1, -3.0 - 0.5 + 0.2]]).unwrap());
        let zero = m.classify(&Tensor::scalar(0.0), &Tensor::scalar(0.0)).unwrap();
        assert_eq!(zero, m.head_bias);
    }

    #[test]
    fn text_missing_ignores_text_payload() {
        let m = DualEncoderModel::new(tiny_config(), 1).unwrap();
        let mut r = tiny_records(3)[0].clone();
        r.mask = Mask::TextMissing;
        let a = m.model_forward(&r).unwrap();
        r.text = Some(vec![5, 6, 7]);
        let b = m.model_forward(&r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vision_placeholder_is_shared() {
        let m = DualEncoderModel::new(tiny_config(), 1).unwrap();
        let recs = tiny_records(6);
        let mut a = recs[0].clone();
        let mut b = recs[1].clone();
        for r in [&mut a, &mut b] {
            r.mask = Mask::ImageMissing;
            r.vision = None;
        }
        assert_eq!(m.encode(&a, Side::Vision).unwrap(), m.encode(&b, Side::Vision).unwrap());
        assert_eq!(m.encode(&a, Side::Text).unwrap().shape(), (1, 4));
    }

    #[test]
    fn inconsistent_payload_is_invalid() {
        let m = DualEncoderModel::new(tiny_config(), 1).unwrap();
        let mut r = tiny_records(3)[0].clone();
        r.vision = None;
        assert!(matches!(m.model_forward(&r), Err(Error::InvalidSample(_))));
    }

    #[test]
    fn prefix_cache_matches_full_forward() {
        let mut m = DualEncoderModel::new(tiny_config(), 3).unwrap();
        let recs = tiny_records(9);
        let base = m.logits(&recs).unwrap();
        m.attach(
            AdapterConfig {
                rank: 2,
                attach_layers: 1,
                ..AdapterConfig::default()
            },
            4,
        )
        .unwrap();
        assert_eq!(m.boundary(Side::Vision), 1);
        let adapted = m.logits(&recs).unwrap();
        let rel = adapted.sub(&base).unwrap().frobenius_norm() / base.frobenius_norm();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn merged_model_matches_and_refuses_second_merge() {
        let mut m = DualEncoderModel::new(tiny_config(), 3).unwrap();
        m.attach(
            AdapterConfig {
                rank: 2,
                ..AdapterConfig::default()
            },
            4,
        )
        .unwrap();
        let mut rng = seed::rng(5);
        for t in m.params_mut() {
            let (r, c) = t.shape();
            t.add_assign(&Tensor::randn(r, c, 0.3, &mut rng));
        }
        let recs = tiny_records(6);
        let merged = m.merge_all(0).unwrap();
        assert!(merged.adapters.is_none());
        let a = m.logits(&recs).unwrap();
        let b = merged.logits(&recs).unwrap();
        assert!(a.sub(&b).unwrap().frobenius_norm() / a.frobenius_norm() < 1e-8);
        assert!(matches!(merged.merge_all(0), Err(Error::AlreadyMerged)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = DualEncoderModel::new(tiny_config(), 3).unwrap();
        m.attach(
            AdapterConfig {
                rank: 2,
                ..AdapterConfig::default()
            },
            4,
        )
        .unwrap();
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let ckpt: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(DualEncoderModel::from_checkpoint(&ckpt).unwrap(), m);
    }
}

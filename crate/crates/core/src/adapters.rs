//! Cross-modal low-rank adapters with Gram-matrix coupling.
//!
//! Each attachment site pairs one vision weight `W0ᵛ` (d_v×d_v) with one text
//! weight `W0ᵗ` (d_t×d_t). The adapted weights are
//!
//! ```text
//! Wᵛ = αᵛ·dir(W0ᵛ + Bᵛ·Aᵛ) + αˢ·dir(W0ᵛ + Sᵛᵀ·Gᵗ·Sᵛ)
//! Wᵗ = αᵗ·dir(W0ᵗ + Bᵗ·Aᵗ) + αˢ·dir(W0ᵗ + Sᵗᵀ·Gᵛ·Sᵗ)
//! ```
//!
//! with `dir(M) = M / ||M||_F`, `Gᵛ = Sᵛ·Sᵛᵀ` and `Gᵗ = Sᵗ·Sᵗᵀ` (both r×r).
//! Because the two towers only exchange r×r Gram matrices, the widths d_v
//! and d_t can differ. Every term is a dense matrix of the tower's own
//! width, so the whole expression folds into one matrix for inference
//! ([`merge`]).
//!
//! [`Variant`] selects the ablations and the LoRA / DoRA-style baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Norm floor below which a direction is considered collapsed.
pub const DIRECTION_EPS: f64 = 1e-12;

/// Largest relative deviation a merged weight may show against the
/// factored adapter evaluation.
pub const MERGE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Specific and shared terms, cross-modal Gram coupling.
    Mora,
    /// As `Mora`, with the frozen weight subtracted once.
    MoraWithW0,
    /// Shared term only.
    NoSpecific,
    /// Identity in place of the cross-modal Gram matrix.
    NoGram,
    /// A free, symmetrized r×r matrix in place of the Gram matrix.
    LearnableGram,
    /// `W0 + scaling·B·A`.
    Lora,
    /// `α·dir(W0 + B·A)`.
    DoraLike,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Mora,
        Variant::MoraWithW0,
        Variant::NoSpecific,
        Variant::NoGram,
        Variant::LearnableGram,
        Variant::Lora,
        Variant::DoraLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mora => "mora",
            Variant::MoraWithW0 => "mora_with_w0",
            Variant::NoSpecific => "no_specific",
            Variant::NoGram => "no_gram",
            Variant::LearnableGram => "learnable_gram",
            Variant::Lora => "lora",
            Variant::DoraLike => "dora_like",
        }
    }

    pub fn has_specific(self) -> bool {
        self != Variant::NoSpecific
    }

    pub fn has_specific_magnitude(self) -> bool {
        self.has_specific() && self != Variant::Lora
    }

    pub fn has_shared(self) -> bool {
        !matches!(self, Variant::Lora | Variant::DoraLike)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Q" | "q" => Ok(MatrixKind::Q),
            "K" | "k" => Ok(MatrixKind::K),
            "V" | "v" => Ok(MatrixKind::V),
            "O" | "o" => Ok(MatrixKind::O),
            _ => Err(Error::Config(format!("unknown matrix kind `{s}`"))),
        }
    }
}

/// Which block of layers receives adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Front,
    Middle,
    Rear,
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(Position::Front),
            "middle" => Ok(Position::Middle),
            "rear" => Ok(Position::Rear),
            _ => Err(Error::Config(format!("unknown position `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Vision,
    Text,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Vision => "vision",
            Side::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub variant: Variant,
    /// Number of layer pairs that receive adapters.
    pub attach_layers: usize,
    pub attach_matrices: Vec<MatrixKind>,
    pub position: Position,
    /// Standard deviation of the shared factors at initialization.
    pub init_scale_s: f64,
    /// Multiplier on `B·A` in the `lora` variant.
    pub lora_scaling: f64,
    /// Multiplier on every low-rank delta before normalization.
    pub strength: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            variant: Variant::Mora,
            attach_layers: 2,
            attach_matrices: vec![MatrixKind::Q, MatrixKind::V],
            position: Position::Rear,
            init_scale_s: 1e-3,
            lora_scaling: 1.0,
            strength: 1.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, d_v: usize, d_t: usize, depth_v: usize, depth_t: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.rank > d_v.min(d_t) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(d_v, d_t) = {}",
                self.rank,
                d_v.min(d_t)
            )));
        }
        if self.attach_layers > depth_v.min(depth_t) {
            return Err(Error::Config(format!(
                "attach_layers {} exceeds the shallower encoder depth {}",
                self.attach_layers,
                depth_v.min(depth_t)
            )));
        }
        if self.attach_layers > 0 && self.attach_matrices.is_empty() {
            return Err(Error::Config("attach_matrices is empty".into()));
        }
        if !(self.init_scale_s >= 0.0 && self.init_scale_s.is_finite()) {
            return Err(Error::Config("init_scale_s must be finite and non-negative".into()));
        }
        if !self.lora_scaling.is_finite() || !self.strength.is_finite() {
            return Err(Error::Config("lora_scaling and strength must be finite".into()));
        }
        Ok(())
    }

    fn kinds(&self) -> Vec<MatrixKind> {
        let mut kinds = self.attach_matrices.clone();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

/// Location of one adapter pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteId {
    pub index: usize,
    pub vision_layer: usize,
    pub text_layer: usize,
    pub kind: MatrixKind,
}

impl SiteId {
    pub fn layer(&self, side: Side) -> usize {
        match side {
            Side::Vision => self.vision_layer,
            Side::Text => self.text_layer,
        }
    }
}

fn block(depth: usize, count: usize, position: Position) -> Vec<usize> {
    let start = match position {
        Position::Front => 0,
        Position::Middle => (depth - count) / 2,
        Position::Rear => depth - count,
    };
    (start..start + count).collect()
}

/// Attachment sites for towers of the given depths.
///
/// The i-th selected vision layer pairs with the i-th selected text layer,
/// so under `Rear` the k-th-from-last layers of both towers are coupled even
/// when the depths differ.
pub fn site_layout(config: &AdapterConfig, depth_v: usize, depth_t: usize) -> Result<Vec<SiteId>> {
    if config.attach_layers > depth_v.min(depth_t) {
        return Err(Error::Config(format!(
            "attach_layers {} exceeds the shallower encoder depth {}",
            config.attach_layers,
            depth_v.min(depth_t)
        )));
    }
    let vl = block(depth_v, config.attach_layers, config.position);
    let tl = block(depth_t, config.attach_layers, config.position);
    let mut sites = Vec::new();
    for (v, t) in vl.into_iter().zip(tl) {
        for kind in config.kinds() {
            sites.push(SiteId {
                index: sites.len(),
                vision_layer: v,
                text_layer: t,
                kind,
            });
        }
    }
    Ok(sites)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpecificAdapter {
    /// r×d.
    pub a: Tensor,
    /// d×r, zero at construction.
    pub b: Tensor,
    /// 1×1; absent for the `lora` variant.
    pub magnitude: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedPair {
    /// r×d_v.
    pub s_v: Tensor,
    /// r×d_t.
    pub s_t: Tensor,
    /// 1×1, used by both towers.
    pub magnitude: Tensor,
    /// r×r, only for [`Variant::LearnableGram`]; symmetrized at use.
    pub learnable_gram: Option<Tensor>,
}

/// Learnable state for one vision/text site plus the frozen weights it wraps.
#[derive(Clone, Debug, PartialEq)]
pub struct MoraAdapterPair {
    pub site: SiteId,
    pub variant: Variant,
    pub rank: usize,
    pub lora_scaling: f64,
    pub strength: f64,
    pub specific_v: Option<ModalitySpecificAdapter>,
    pub specific_t: Option<ModalitySpecificAdapter>,
    pub shared: Option<SharedPair>,
    frozen_v: Tensor,
    frozen_t: Tensor,
}

/// Builds a fresh pair.
///
/// `A` is uniform in ±1/√d, `B` is zero and the shared factors are normal
/// with deviation `init_scale_s`. Magnitudes are chosen so the effective
/// weight starts at `W0` up to the (tiny) shared delta; see
/// [`initial_magnitudes`].
pub fn init_adapter_pair(
    config: &AdapterConfig,
    site: SiteId,
    w0_v: &Tensor,
    w0_t: &Tensor,
    seed: u64,
) -> Result<MoraAdapterPair> {
    let (d_v, d_t) = (w0_v.rows(), w0_t.rows());
    if w0_v.cols() != d_v || w0_t.cols() != d_t {
        return Err(Error::Contract(format!(
            "frozen weights must be square, got {:?} and {:?}",
            w0_v.shape(),
            w0_t.shape()
        )));
    }
    if config.rank == 0 || config.rank > d_v.min(d_t) {
        return Err(Error::Config(format!(
            "rank {} must lie in 1..={}",
            config.rank,
            d_v.min(d_t)
        )));
    }
    let r = config.rank;
    let variant = config.variant;
    let mut rng = seed::rng(seed);
    // Drawn in a fixed order for every variant so ablations share streams.
    let a_v = Tensor::uniform(r, d_v, 1.0 / (d_v as f64).sqrt(), &mut rng);
    let a_t = Tensor::uniform(r, d_t, 1.0 / (d_t as f64).sqrt(), &mut rng);
    let s_v = Tensor::randn(r, d_v, config.init_scale_s, &mut rng);
    let s_t = Tensor::randn(r, d_t, config.init_scale_s, &mut rng);

    let mags = initial_magnitudes(variant, w0_v.frobenius_norm(), w0_t.frobenius_norm());
    let specific = |a: Tensor, d: usize, mag: Option<f64>| ModalitySpecificAdapter {
        a,
        b: Tensor::zeros(d, r),
        magnitude: mag.map(Tensor::scalar),
    };
    let (specific_v, specific_t) = if variant.has_specific() {
        (
            Some(specific(a_v, d_v, mags.vision)),
            Some(specific(a_t, d_t, mags.text)),
        )
    } else {
        (None, None)
    };
    let shared = mags.shared.map(|alpha| SharedPair {
        s_v,
        s_t,
        magnitude: Tensor::scalar(alpha),
        learnable_gram: (variant == Variant::LearnableGram).then(|| Tensor::identity(r)),
    });
    Ok(MoraAdapterPair {
        site,
        variant,
        rank: r,
        lora_scaling: config.lora_scaling,
        strength: config.strength,
        specific_v,
        specific_t,
        shared,
        frozen_v: w0_v.clone(),
        frozen_t: w0_t.clone(),
    })
}

/// Initial magnitudes for a variant given `||W0ᵛ||_F` and `||W0ᵗ||_F`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialMagnitudes {
    pub vision: Option<f64>,
    pub text: Option<f64>,
    pub shared: Option<f64>,
}

/// The shared magnitude is a single scalar for both towers, so the
/// specific magnitudes absorb the difference between the two base norms:
/// with `αˢ = min(nᵛ, nᵗ)/2` and `αᵛ = nᵛ - αˢ` both towers start exactly at
/// their base weights (up to the shared delta). For equal norms this is
/// `αᵛ = αᵗ = αˢ = n/2`.
pub fn initial_magnitudes(variant: Variant, norm_v: f64, norm_t: f64) -> InitialMagnitudes {
    let lower = norm_v.min(norm_t);
    match variant {
        Variant::Mora | Variant::NoGram | Variant::LearnableGram => {
            let s = lower / 2.0;
            InitialMagnitudes {
                vision: Some(norm_v - s),
                text: Some(norm_t - s),
                shared: Some(s),
            }
        }
        Variant::MoraWithW0 => InitialMagnitudes {
            vision: Some(2.0 * norm_v - lower),
            text: Some(2.0 * norm_t - lower),
            shared: Some(lower),
        },
        // one scalar cannot match two different norms; start halfway (geometrically)
        Variant::NoSpecific => InitialMagnitudes {
            vision: None,
            text: None,
            shared: Some((norm_v * norm_t).sqrt()),
        },
        Variant::Lora => InitialMagnitudes {
            vision: None,
            text: None,
            shared: None,
        },
        Variant::DoraLike => InitialMagnitudes {
            vision: Some(norm_v),
            text: Some(norm_t),
            shared: None,
        },
    }
}

struct BoundSpecific {
    a: Var,
    b: Var,
    magnitude: Option<Var>,
}

struct BoundShared {
    s_v: Var,
    s_t: Var,
    magnitude: Var,
    learnable_gram: Option<Var>,
}

/// Tape handles for one pair's learnable tensors.
pub struct BoundPair {
    specific_v: Option<BoundSpecific>,
    specific_t: Option<BoundSpecific>,
    shared: Option<BoundShared>,
}

impl MoraAdapterPair {
    pub fn frozen(&self, side: Side) -> &Tensor {
        match side {
            Side::Vision => &self.frozen_v,
            Side::Text => &self.frozen_t,
        }
    }

    pub fn specific(&self, side: Side) -> Option<&ModalitySpecificAdapter> {
        match side {
            Side::Vision => self.specific_v.as_ref(),
            Side::Text => self.specific_t.as_ref(),
        }
    }

    /// Learnable tensors with stable names, in binding order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let p = format!("site{}.{:?}", self.site.index, self.site.kind);
        let mut out = Vec::new();
        for (tag, spec) in [("v", &self.specific_v), ("t", &self.specific_t)] {
            if let Some(s) = spec {
                out.push((format!("{p}.A_{tag}"), &s.a));
                out.push((format!("{p}.B_{tag}"), &s.b));
                if let Some(m) = &s.magnitude {
                    out.push((format!("{p}.alpha_{tag}"), m));
                }
            }
        }
        if let Some(sh) = &self.shared {
            out.push((format!("{p}.S_v"), &sh.s_v));
            out.push((format!("{p}.S_t"), &sh.s_t));
            out.push((format!("{p}.alpha_s"), &sh.magnitude));
            if let Some(g) = &sh.learnable_gram {
                out.push((format!("{p}.G"), g));
            }
        }
        out
    }

    /// Same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for spec in [&mut self.specific_v, &mut self.specific_t].into_iter().flatten() {
            out.push(&mut spec.a);
            out.push(&mut spec.b);
            if let Some(m) = &mut spec.magnitude {
                out.push(m);
            }
        }
        if let Some(sh) = &mut self.shared {
            out.push(&mut sh.s_v);
            out.push(&mut sh.s_t);
            out.push(&mut sh.magnitude);
            if let Some(g) = &mut sh.learnable_gram {
                out.push(g);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn parameter_checksum(&self) -> String {
        let params = self.params();
        codec::checksum(params.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Registers the learnable tensors as tape leaves, appending each handle
    /// to `vars` in [`Self::params`] order.
    pub fn bind(&self, tape: &Tape, vars: &mut Vec<Var>) -> BoundPair {
        let mut leaf = |t: &Tensor| {
            let v = tape.leaf(t.clone());
            vars.push(v);
            v
        };
        let mut bind_specific = |s: &ModalitySpecificAdapter| BoundSpecific {
            a: leaf(&s.a),
            b: leaf(&s.b),
            magnitude: s.magnitude.as_ref().map(&mut leaf),
        };
        let specific_v = self.specific_v.as_ref().map(&mut bind_specific);
        let specific_t = self.specific_t.as_ref().map(&mut bind_specific);
        let shared = self.shared.as_ref().map(|sh| BoundShared {
            s_v: leaf(&sh.s_v),
            s_t: leaf(&sh.s_t),
            magnitude: leaf(&sh.magnitude),
            learnable_gram: sh.learnable_gram.as_ref().map(&mut leaf),
        });
        BoundPair {
            specific_v,
            specific_t,
            shared,
        }
    }

    /// The adapted weight for one tower as a differentiable tape node.
    pub fn effective_weight_on(&self, tape: &Tape, bound: &BoundPair, side: Side) -> Result<Var> {
        let w0 = tape.constant(self.frozen(side).clone());
        let specific = match side {
            Side::Vision => bound.specific_v.as_ref(),
            Side::Text => bound.specific_t.as_ref(),
        };
        let low_rank = |s: &BoundSpecific| -> Result<Var> { tape.matmul(s.b, s.a) };
        let missing = || Error::Contract(format!("variant {} lacks a required factor", self.variant));

        if self.variant == Variant::Lora {
            let s = specific.ok_or_else(missing)?;
            let delta = tape.scale(low_rank(s)?, self.lora_scaling * self.strength);
            return tape.add(w0, delta);
        }

        let mut total: Option<Var> = None;
        if let Some(s) = specific {
            let delta = tape.scale(low_rank(s)?, self.strength);
            let dir = tape.normalize_direction(tape.add(w0, delta)?, DIRECTION_EPS)?;
            total = Some(tape.mul_scalar(dir, s.magnitude.ok_or_else(missing)?)?);
        }
        if let Some(sh) = &bound.shared {
            let (own, other) = match side {
                Side::Vision => (sh.s_v, sh.s_t),
                Side::Text => (sh.s_t, sh.s_v),
            };
            let core = match self.variant {
                Variant::NoGram => own,
                Variant::LearnableGram => {
                    let g = sh.learnable_gram.ok_or_else(missing)?;
                    let sym = tape.scale(tape.add(g, tape.transpose(g))?, 0.5);
                    tape.matmul(sym, own)?
                }
                _ => tape.matmul(tape.gram(other), own)?,
            };
            let delta = tape.matmul(tape.transpose(own), core)?;
            let delta = tape.scale(delta, self.strength);
            let dir = tape.normalize_direction(tape.add(w0, delta)?, DIRECTION_EPS)?;
            let term = tape.mul_scalar(dir, sh.magnitude)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        let total = total.ok_or_else(missing)?;
        if self.variant == Variant::MoraWithW0 {
            tape.sub(total, w0)
        } else {
            Ok(total)
        }
    }

    /// Dense adapted weight at the current parameters.
    pub fn effective_weight(&self, side: Side) -> Result<Tensor> {
        let tape = Tape::new();
        let mut vars = Vec::new();
        let bound = self.bind(&tape, &mut vars);
        let w = self.effective_weight_on(&tape, &bound, side)?;
        Ok(tape.value(w).as_ref().clone())
    }

    /// Gram matrix fed into `side`'s shared term: the other tower's `S·Sᵀ`
    /// (or its replacement under the Gram ablations). `None` without a shared term.
    pub fn coupling_matrix(&self, side: Side) -> Option<Tensor> {
        let sh = self.shared.as_ref()?;
        Some(match self.variant {
            Variant::NoGram => Tensor::identity(self.rank),
            Variant::LearnableGram => {
                let g = sh.learnable_gram.as_ref()?;
                g.add(&g.transpose()).expect("square").scale(0.5)
            }
            _ => {
                let other = match side {
                    Side::Vision => &sh.s_t,
                    Side::Text => &sh.s_v,
                };
                crate::linalg::GramMatrix::from_factor(other).to_tensor()
            }
        })
    }

    /// `x · W_side` evaluated in factored form: low-rank products applied
    /// to `x` directly, with the normalizing norms computed from the dense
    /// updated matrices. This is what an unmerged forward computes, and it
    /// shares no code path with the tape.
    pub fn adapter_forward(&self, side: Side, x: &Tensor) -> Result<Tensor> {
        let w0 = self.frozen(side);
        let base = x.matmul(w0)?;
        let missing = || Error::Contract(format!("variant {} lacks a required factor", self.variant));
        if self.variant == Variant::Lora {
            let s = self.specific(side).ok_or_else(missing)?;
            let lr = x.matmul(&s.b)?.matmul(&s.a)?;
            return base.add(&lr.scale(self.lora_scaling * self.strength));
        }
        let mut out = Tensor::zeros(x.rows(), w0.cols());
        if let Some(s) = self.specific(side) {
            let dense = w0.add(&s.b.matmul(&s.a)?.scale(self.strength))?;
            let norm = checked_norm(&dense)?;
            let lr = x.matmul(&s.b)?.matmul(&s.a)?.scale(self.strength);
            let alpha = s.magnitude.as_ref().ok_or_else(missing)?.item();
            out = out.add(&base.add(&lr)?.scale(alpha / norm))?;
        }
        if let Some(sh) = &self.shared {
            let own = match side {
                Side::Vision => &sh.s_v,
                Side::Text => &sh.s_t,
            };
            let g = self.coupling_matrix(side).ok_or_else(missing)?;
            let dense = w0.add(&own.transpose().matmul(&g.matmul(own)?)?.scale(self.strength))?;
            let norm = checked_norm(&dense)?;
            let lr = x
                .matmul(&own.transpose())?
                .matmul(&g)?
                .matmul(own)?
                .scale(self.strength);
            out = out.add(&base.add(&lr)?.scale(sh.magnitude.item() / norm))?;
        }
        if self.variant == Variant::MoraWithW0 {
            out = out.sub(&base)?;
        }
        Ok(out)
    }
}

fn checked_norm(m: &Tensor) -> Result<f64> {
    let norm = m.frobenius_norm();
    if norm <= DIRECTION_EPS {
        return Err(Error::DegenerateDirection {
            norm,
            eps: DIRECTION_EPS,
        });
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeProvenance {
    pub site: SiteId,
    pub side: Side,
    pub variant: Variant,
    pub rank: usize,
    pub parameter_checksum: String,
    pub max_relative_deviation: f64,
}

/// A single dense weight replacing an adapter pair's tower side.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedWeight {
    pub weight: Tensor,
    pub provenance: MergeProvenance,
}

/// Folds a pair into one dense matrix for `side` and certifies it against
/// [`MoraAdapterPair::adapter_forward`] on `certify_inputs`.
pub fn merge(pair: &MoraAdapterPair, side: Side, certify_inputs: &[Tensor]) -> Result<MergedWeight> {
    let weight = pair.effective_weight(side)?;
    let mut worst = 0.0f64;
    for x in certify_inputs {
        let merged = x.matmul(&weight)?;
        let factored = pair.adapter_forward(side, x)?;
        let scale = factored.frobenius_norm();
        let diff = merged.sub(&factored)?.frobenius_norm();
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
    }
    if !(worst <= MERGE_TOLERANCE) {
        return Err(Error::MergeIntegrity {
            deviation: worst,
            tolerance: MERGE_TOLERANCE,
        });
    }
    Ok(MergedWeight {
        weight,
        provenance: MergeProvenance {
            site: pair.site,
            side,
            variant: pair.variant,
            rank: pair.rank,
            parameter_checksum: pair.parameter_checksum(),
            max_relative_deviation: worst,
        },
    })
}

/// All adapter pairs attached to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub pairs: Vec<MoraAdapterPair>,
}

impl AdapterSet {
    /// Number of learnable adapter scalars (the classifier head is counted
    /// by the model).
    pub fn trainable_parameter_count(&self) -> usize {
        self.pairs.iter().map(MoraAdapterPair::parameter_count).sum()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.pairs.iter().flat_map(MoraAdapterPair::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.pairs.iter_mut().flat_map(MoraAdapterPair::params_mut).collect()
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        let sites = self
            .pairs
            .iter()
            .map(|p| SiteRecord {
                site: p.site,
                tensors: p.params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            })
            .collect::<Vec<_>>();
        let checksum = checkpoint_checksum(&sites);
        AdapterCheckpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            sites,
            checksum,
        }
    }

    /// Rebuilds the set from a checkpoint, re-linking each site to the
    /// frozen weights returned by `frozen(site)`.
    pub fn from_checkpoint(
        ckpt: &AdapterCheckpoint,
        mut frozen: impl FnMut(&SiteId) -> Result<(Tensor, Tensor)>,
    ) -> Result<Self> {
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", ckpt.format_version)));
        }
        if checkpoint_checksum(&ckpt.sites) != ckpt.checksum {
            return Err(Error::Format("adapter checksum mismatch".into()));
        }
        let mut pairs = Vec::with_capacity(ckpt.sites.len());
        for rec in &ckpt.sites {
            let (w0_v, w0_t) = frozen(&rec.site)?;
            // a fresh pair fixes the variant's tensor layout; values come from the record
            let mut pair = init_adapter_pair(&ckpt.config, rec.site, &w0_v, &w0_t, 0)?;
            let names: Vec<String> = pair.params().into_iter().map(|(n, _)| n).collect();
            if names.len() != rec.tensors.len() {
                return Err(Error::Format(format!("site {} has unexpected tensors", rec.site.index)));
            }
            for (name, slot) in names.iter().zip(pair.params_mut()) {
                let t = rec
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
            pairs.push(pair);
        }
        Ok(Self {
            config: ckpt.config.clone(),
            pairs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site: SiteId,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Serialized adapter state: config, per-site tensors, checksum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format_version: u32,
    pub config: AdapterConfig,
    pub sites: Vec<SiteRecord>,
    pub checksum: String,
}

fn checkpoint_checksum(sites: &[SiteRecord]) -> String {
    codec::checksum(sites.iter().flat_map(|s| s.tensors.iter().map(|(n, t)| (n.as_str(), t))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(d: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        Tensor::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng)
    }

    fn site() -> SiteId {
        SiteId {
            index: 0,
            vision_layer: 3,
            text_layer: 3,
            kind: MatrixKind::Q,
        }
    }

    fn config(variant: Variant, rank: usize) -> AdapterConfig {
        AdapterConfig {
            rank,
            variant,
            ..AdapterConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let (wv, wt) = (base(768, 1), base(512, 2));
        let cfg = config(Variant::Mora, 4);
        let p1 = init_adapter_pair(&cfg, site(), &wv, &wt, 9).unwrap();
        let p2 = init_adapter_pair(&cfg, site(), &wv, &wt, 9).unwrap();
        assert_eq!(p1, p2);
        let sh = p1.shared.as_ref().unwrap();
        assert_eq!(sh.s_v.shape(), (4, 768));
        assert_eq!(sh.s_t.shape(), (4, 512));
        let sv = p1.specific_v.as_ref().unwrap();
        assert_eq!(sv.b, Tensor::zeros(768, 4));
    }

    #[test]
    fn rank_too_large_is_config_error() {
        let cfg = config(Variant::Mora, 9);
        let err = init_adapter_pair(&cfg, site(), &base(12, 1), &base(8, 2), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_factors_reproduce_base_exactly() {
        let (wv, wt) = (base(6, 3), base(6, 4));
        let mut pair = init_adapter_pair(&config(Variant::Mora, 2), site(), &wv, &wt, 1).unwrap();
        let half = wv.frobenius_norm() / 2.0;
        let sh = pair.shared.as_mut().unwrap();
        sh.s_v = Tensor::zeros(2, 6);
        sh.magnitude = Tensor::scalar(half);
        pair.specific_v.as_mut().unwrap().magnitude = Some(Tensor::scalar(half));
        let w = pair.effective_weight(Side::Vision).unwrap();
        assert!(w.max_abs_diff(&wv) <= 4.0 * f64::EPSILON * wv.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn lora_with_zero_b_is_base() {
        let (wv, wt) = (base(6, 3), base(4, 4));
        let pair = init_adapter_pair(&config(Variant::Lora, 2), site(), &wv, &wt, 1).unwrap();
        assert_eq!(pair.effective_weight(Side::Vision).unwrap(), wv);
        assert_eq!(pair.effective_weight(Side::Text).unwrap(), wt);
    }

    #[test]
    fn fresh_init_stays_near_base_for_every_variant() {
        let (wv, wt) = (base(16, 5), base(12, 6));
        for variant in Variant::ALL {
            let pair = init_adapter_pair(&config(variant, 4), site(), &wv, &wt, 2).unwrap();
            for (side, w0) in [(Side::Vision, &wv), (Side::Text, &wt)] {
                let w = pair.effective_weight(side).unwrap();
                let rel = w.sub(w0).unwrap().frobenius_norm() / w0.frobenius_norm();
                let bound = if variant == Variant::NoSpecific {
                    // a single shared scale cannot match both base norms
                    let r = (wv.frobenius_norm() / wt.frobenius_norm()).sqrt();
                    (r - 1.0).abs().max((1.0 / r - 1.0).abs()) + 1e-6
                } else {
                    1e-3
                };
                assert!(rel < bound, "{variant} {side:?}: {rel}");
            }
        }
    }

    #[test]
    fn parameter_count_from_shapes() {
        let (wv, wt) = (base(64, 1), base(48, 2));
        let pair = init_adapter_pair(&config(Variant::Mora, 4), site(), &wv, &wt, 0).unwrap();
        let specific = (4 * 64 + 64 * 4) + (4 * 48 + 48 * 4);
        let shared = 4 * 64 + 4 * 48;
        assert_eq!(pair.parameter_count(), specific + shared + 3);
        assert_eq!(pair.parameter_count(), 1347);
    }

    #[test]
    fn merge_is_checksum_stable() {
        let (wv, wt) = (base(8, 1), base(6, 2));
        let mut rng = seed::rng(3);
        let mut pair = init_adapter_pair(&config(Variant::Mora, 2), site(), &wv, &wt, 0).unwrap();
        for t in pair.params_mut() {
            let (r, c) = t.shape();
            *t = t.add(&Tensor::randn(r, c, 0.1, &mut rng)).unwrap();
        }
        let xs = vec![Tensor::randn(5, 8, 1.0, &mut rng)];
        let m1 = merge(&pair, Side::Vision, &xs).unwrap();
        let m2 = merge(&pair, Side::Vision, &xs).unwrap();
        assert_eq!(m1.provenance.parameter_checksum, m2.provenance.parameter_checksum);
        assert_eq!(m1.weight, m2.weight);
        assert!(m1.provenance.max_relative_deviation < MERGE_TOLERANCE);
    }

    #[test]
    fn layout_pairs_rear_layers() {
        let cfg = AdapterConfig::default();
        let sites = site_layout(&cfg, 6, 4).unwrap();
        let layers: Vec<_> = sites.iter().map(|s| (s.vision_layer, s.text_layer, s.kind)).collect();
        assert_eq!(
            layers,
            vec![
                (4, 2, MatrixKind::Q),
                (4, 2, MatrixKind::V),
                (5, 3, MatrixKind::Q),
                (5, 3, MatrixKind::V)
            ]
        );
        let front = AdapterConfig {
            position: Position::Front,
            ..cfg.clone()
        };
        assert_eq!(site_layout(&front, 6, 4).unwrap()[0].vision_layer, 0);
        let middle = AdapterConfig {
            position: Position::Middle,
            ..cfg.clone()
        };
        assert_eq!(site_layout(&middle, 6, 4).unwrap()[0].vision_layer, 2);
        let deep = AdapterConfig {
            attach_layers: 5,
            ..cfg
        };
        assert!(site_layout(&deep, 6, 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (wv, wt) = (base(8, 1), base(6, 2));
        let cfg = config(Variant::LearnableGram, 2);
        let mut rng = seed::rng(11);
        let mut pair = init_adapter_pair(&cfg, site(), &wv, &wt, 4).unwrap();
        for t in pair.params_mut() {
            let (r, c) = t.shape();
            *t = Tensor::randn(r, c, 0.7, &mut rng);
        }
        let set = AdapterSet {
            config: cfg,
            pairs: vec![pair],
        };
        let json = serde_json::to_string(&set.to_checkpoint()).unwrap();
        let back: AdapterCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = AdapterSet::from_checkpoint(&back, |_| Ok((wv.clone(), wt.clone()))).unwrap();
        assert_eq!(restored, set);

        let mut tampered = back.clone();
        tampered.checksum = "00".into();
        assert!(AdapterSet::from_checkpoint(&tampered, |_| Ok((wv.clone(), wt.clone()))).is_err());
    }
}

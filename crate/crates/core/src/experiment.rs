//! End-to-end pipelines: dataset generation, training, evaluation, merging
//! and sweeps. The command-line front end is a thin layer over these.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{Position, Variant};
use crate::codec::FORMAT_VERSION;
use crate::config::RunConfig;
use crate::data::{
    apply_missing, read_jsonl, write_jsonl, DatasetMeta, Generator, Mask, MaskCounts, MissingSpec, SampleRecord,
    SplitMeta,
};
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, ModelCheckpoint};
use crate::seed::derive_seed;
use crate::train::{evaluate, train, Metrics, TrainReport};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const META_FILE: &str = "meta.json";

/// Train and validation splits carry the training mask; the evaluation
/// split is stored complete and masked when evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub eval: Vec<SampleRecord>,
    pub meta: DatasetMeta,
}

pub fn mask_seed(cfg: &RunConfig, split: &str) -> u64 {
    derive_seed(cfg.seed, "mask", split_index(split))
}

fn split_index(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 1,
        "eval" => 2,
        _ => 3,
    }
}

pub fn generate_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let generator = Generator::new(&d.generator)?;
    let n_train = d.generator.samples;
    let train = generator.sample(n_train, 0, 0)?;
    let val = if d.val_samples > 0 {
        generator.sample(d.val_samples, 1, n_train as u64)?
    } else {
        Vec::new()
    };
    let eval = generator.sample(d.eval_samples, 2, (n_train + d.val_samples) as u64)?;

    let train = apply_missing(&train, &d.train_missing, mask_seed(cfg, "train"))?;
    let val = apply_missing(&val, &d.train_missing, mask_seed(cfg, "val"))?;
    let split = |name: &str, file: &str, stream: u64, missing: MissingSpec, recs: &[SampleRecord]| SplitMeta {
        name: name.into(),
        file: file.into(),
        stream,
        missing,
        missing_seed: mask_seed(cfg, name),
        counts: MaskCounts::of(recs),
    };
    let meta = DatasetMeta::new(
        d.generator.clone(),
        vec![
            split("train", TRAIN_FILE, 0, d.train_missing, &train),
            split("val", VAL_FILE, 1, d.train_missing, &val),
            split("eval", EVAL_FILE, 2, MissingSpec::complete(), &eval),
        ],
    );
    Ok(Datasets { train, val, eval, meta })
}

pub fn write_datasets(ds: &Datasets, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&ds.train, &dir.join(TRAIN_FILE))?;
    write_jsonl(&ds.val, &dir.join(VAL_FILE))?;
    write_jsonl(&ds.eval, &dir.join(EVAL_FILE))?;
    write_json(&ds.meta, &dir.join(META_FILE))
}

pub fn read_datasets(dir: &Path) -> Result<Datasets> {
    let meta_path = dir.join(META_FILE);
    let meta: DatasetMeta = read_json(&meta_path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported format_version", meta_path.display())));
    }
    Ok(Datasets {
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        val: read_jsonl(&dir.join(VAL_FILE))?,
        eval: read_jsonl(&dir.join(EVAL_FILE))?,
        meta,
    })
}

/// Reads the configured dataset directory, or generates in memory.
pub fn datasets_for(cfg: &RunConfig) -> Result<Datasets> {
    match &cfg.data.dir {
        Some(dir) => read_datasets(Path::new(dir)),
        None => generate_datasets(cfg),
    }
}

/// Frozen towers from the master seed, adapters from the replicate.
pub fn build_model(cfg: &RunConfig) -> Result<DualEncoderModel> {
    let mut model = DualEncoderModel::new(cfg.model.clone(), derive_seed(cfg.seed, "towers", 0))?;
    if cfg.adapter.attach_layers > 0 {
        model.attach(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter", cfg.replicate))?;
    }
    Ok(model)
}

pub fn train_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "train", cfg.replicate)
}

/// Masks complete records with `spec`; already-masked records are used as given.
pub fn masked_for_eval(records: &[SampleRecord], spec: &MissingSpec, seed: u64) -> Result<Vec<SampleRecord>> {
    if records.iter().all(|r| r.mask == Mask::Complete) {
        apply_missing(records, spec, seed)
    } else if spec.ratio == 0.0 {
        Ok(records.to_vec())
    } else {
        Err(Error::Contract("evaluation records are already masked".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub format_version: u32,
    pub missing: MissingSpec,
    pub counts: MaskCounts,
    pub metrics: Metrics,
}

pub fn evaluate_scenario(
    model: &DualEncoderModel,
    records: &[SampleRecord],
    spec: &MissingSpec,
    seed: u64,
) -> Result<EvalResult> {
    let masked = masked_for_eval(records, spec, seed)?;
    Ok(EvalResult {
        format_version: FORMAT_VERSION,
        missing: *spec,
        counts: MaskCounts::of(&masked),
        metrics: evaluate(model, &masked)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub model: DualEncoderModel,
    pub report: TrainReport,
    /// Evaluation split with every sample complete.
    pub clean: EvalResult,
    /// Evaluation split under the configured evaluation mask.
    pub missing: EvalResult,
}

pub fn run(cfg: &RunConfig, data: &Datasets) -> Result<RunOutcome> {
    let mut model = build_model(cfg)?;
    let report = train(&mut model, &data.train, &data.val, &cfg.optim, train_seed(cfg))?;
    let clean = evaluate_scenario(&model, &data.eval, &MissingSpec::complete(), 0)?;
    let missing = evaluate_scenario(&model, &data.eval, &cfg.data.eval_missing, mask_seed(cfg, "eval"))?;
    Ok(RunOutcome {
        model,
        report,
        clean,
        missing,
    })
}

/// Checkpoint file: run configuration plus the model snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub format_version: u32,
    pub run_config: RunConfig,
    pub model: ModelCheckpoint,
}

impl RunCheckpoint {
    pub fn new(cfg: &RunConfig, model: &DualEncoderModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            run_config: cfg.clone(),
            model: model.to_checkpoint(),
        }
    }

    pub fn load(path: &Path) -> Result<(RunConfig, DualEncoderModel)> {
        let ckpt: RunCheckpoint = read_json(path)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("{}: unsupported format_version", path.display())));
        }
        let model = DualEncoderModel::from_checkpoint(&ckpt.model)?;
        Ok((ckpt.run_config, model))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub run_config: RunConfig,
    pub trainable_parameters: usize,
    pub checkpoint_checksum: String,
    pub report: TrainReport,
    pub clean: EvalResult,
    pub missing: EvalResult,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "train_report.json";

/// Trains and writes `checkpoint.json` and `train_report.json` under the
/// output directory.
pub fn run_and_save(cfg: &RunConfig) -> Result<RunSummary> {
    let data = datasets_for(cfg)?;
    let out = run(cfg, &data)?;
    let dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&dir)?;
    let ckpt = RunCheckpoint::new(cfg, &out.model);
    let summary = RunSummary {
        format_version: FORMAT_VERSION,
        run_config: cfg.clone(),
        trainable_parameters: out.model.trainable_parameter_count(),
        checkpoint_checksum: ckpt.model.checksum.clone(),
        report: out.report,
        clean: out.clean,
        missing: out.missing,
    };
    write_json(&ckpt, &dir.join(CHECKPOINT_FILE))?;
    write_json(&summary, &dir.join(REPORT_FILE))?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    Layers,
    Position,
    Ratio,
    Variant,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Self::Rank),
            "layers" => Ok(Self::Layers),
            "position" => Ok(Self::Position),
            "ratio" => Ok(Self::Ratio),
            "variant" => Ok(Self::Variant),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// One configuration per axis value. The ratio axis sets both the training
/// and evaluation missing ratio.
pub fn sweep_configs(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<(String, RunConfig)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            let bad = |_| Error::Config(format!("invalid {axis:?} value `{v}`"));
            match axis {
                SweepAxis::Rank => c.adapter.rank = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                SweepAxis::Layers => {
                    c.adapter.attach_layers = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
                }
                SweepAxis::Position => c.adapter.position = v.parse::<Position>()?,
                SweepAxis::Ratio => {
                    let r: f64 = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                    c.data.train_missing.ratio = r;
                    c.data.eval_missing.ratio = r;
                }
                SweepAxis::Variant => c.adapter.variant = v.parse::<Variant>()?,
            }
            c.output_dir = format!("{}/{}_{}", base.output_dir, axis_name(axis), v);
            Ok((v.clone(), c))
        })
        .collect()
}

pub fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Rank => "rank",
        SweepAxis::Layers => "layers",
        SweepAxis::Position => "position",
        SweepAxis::Ratio => "ratio",
        SweepAxis::Variant => "variant",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub status: String,
    pub trainable_parameters: Option<usize>,
    pub clean_headline: Option<f64>,
    pub missing_headline: Option<f64>,
    pub missing_accuracy: Option<f64>,
    pub missing_macro_f1: Option<f64>,
    pub missing_auroc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub checkpoint_checksum: Option<String>,
    pub error: Option<String>,
}

/// Runs every sweep value, recording failures instead of stopping.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for value in values {
        let row = match sweep_configs(base, axis, std::slice::from_ref(value)) {
            Err(e) => failed_row(axis, value, &e),
            Ok(mut cfgs) => {
                let (_, cfg) = cfgs.remove(0);
                match cfg.validate().and_then(|_| run_and_save(&cfg)) {
                    Ok(s) => {
                        let task = cfg.model.task;
                        SweepRow {
                            axis: axis_name(axis).into(),
                            value: value.clone(),
                            status: "ok".into(),
                            trainable_parameters: Some(s.trainable_parameters),
                            clean_headline: Some(s.clean.metrics.headline(task)),
                            missing_headline: Some(s.missing.metrics.headline(task)),
                            missing_accuracy: Some(s.missing.metrics.accuracy),
                            missing_macro_f1: Some(s.missing.metrics.macro_f1),
                            missing_auroc: s.missing.metrics.auroc,
                            best_epoch: s.report.best_epoch,
                            checkpoint_checksum: Some(s.checkpoint_checksum),
                            error: None,
                        }
                    }
                    Err(e) => failed_row(axis, value, &e),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

fn failed_row(axis: SweepAxis, value: &str, e: &Error) -> SweepRow {
    SweepRow {
        axis: axis_name(axis).into(),
        value: value.into(),
        status: "failed".into(),
        trainable_parameters: None,
        clean_headline: None,
        missing_headline: None,
        missing_accuracy: None,
        missing_macro_f1: None,
        missing_auroc: None,
        best_epoch: None,
        checkpoint_checksum: None,
        error: Some(e.to_string()),
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

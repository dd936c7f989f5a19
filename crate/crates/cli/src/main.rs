//! `mora`: generate data, train, evaluate, merge, analyze and sweep.
//!
//! Exit codes: 0 success, 1 partial sweep failure, 2 configuration or usage
//! error, 3 numeric failure (including merge certification).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mora::analysis;
use mora::config::RunConfig;
use mora::data::{read_jsonl, MaskCounts, MissingMode, SampleRecord};
use mora::experiment::{self, RunCheckpoint, SweepAxis};
use mora::Error;

#[derive(Parser)]
#[command(name = "mora", version, about = "Cross-modal low-rank adapters for dual encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set adapter.rank=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Image,
    Text,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Spectrum,
    Intermodal,
    Drift,
    Embeddings,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/eval JSONL splits and a metadata sidecar.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and head; writes checkpoint.json and train_report.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory from gen-data (otherwise generated in memory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a (re-)masked evaluation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or JSONL file; defaults to the checkpoint's data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Configuration whose model block must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Missing ratio in percent; overrides the checkpoint's eval mask.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold every adapter into its frozen weight and certify the result.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Certification report path (default: next to the output).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Spectra, inter-modal geometry, drift or raw embeddings.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference checkpoint for drift (default: the frozen base).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Dataset directory or JSONL file; defaults to the checkpoint's data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// One train+eval per value of an axis; consolidated CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// CSV path (default: <output_dir>/sweep_<axis>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Numeric(_)
            | Error::NonFinite(_)
            | Error::MergeIntegrity { .. }
            | Error::DegenerateDirection { .. }
            | Error::DegenerateEmbedding(_)
            | Error::UndefinedMetric(_),
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData { config, out } => gen_data(&config.load()?, &out),
        Command::Train { config, data, out } => {
            let mut cfg = config.load()?;
            if let Some(d) = data {
                cfg.data.dir = Some(d.to_string_lossy().into_owned());
            }
            if let Some(o) = out {
                cfg.output_dir = o.to_string_lossy().into_owned();
            }
            train(&cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            ratio,
            mode,
            out,
        } => eval(&checkpoint, data.as_deref(), config.as_deref(), ratio, mode, out.as_deref()),
        Command::Merge { checkpoint, out, report } => merge(&checkpoint, &out, report),
        Command::Analyze {
            checkpoint,
            base,
            data,
            kind,
            out,
        } => analyze(&checkpoint, base.as_deref(), data.as_deref(), kind, &out),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => sweep(&config.load()?, &axis, &values, out),
    }
}

fn print_counts(name: &str, c: &MaskCounts) {
    println!(
        "{name}: complete={} image_missing={} text_missing={}",
        c.complete, c.image_missing, c.text_missing
    );
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<u8> {
    let ds = experiment::generate_datasets(cfg)?;
    experiment::write_datasets(&ds, out)?;
    for split in &ds.meta.splits {
        print_counts(&split.name, &split.counts);
    }
    println!("wrote {}", out.display());
    Ok(0)
}

fn train(cfg: &RunConfig) -> Result<u8> {
    let s = experiment::run_and_save(cfg)?;
    let task = cfg.model.task;
    println!("trainable parameters: {}", s.trainable_parameters);
    println!(
        "steps: {} best epoch: {:?} stop: {:?}",
        s.report.steps, s.report.best_epoch, s.report.stop_reason
    );
    println!("clean {}: {:.4}", s.report.headline_metric, s.clean.metrics.headline(task));
    println!(
        "missing ({}% {:?}) {}: {:.4}",
        s.missing.missing.ratio,
        s.missing.missing.mode,
        s.report.headline_metric,
        s.missing.metrics.headline(task)
    );
    println!("checkpoint checksum: {}", s.checkpoint_checksum);
    println!("wrote {}", cfg.output_dir);
    Ok(0)
}

/// Evaluation records: a JSONL file, the eval split of a dataset
/// directory, or the split described by the run configuration.
fn eval_records(data: Option<&Path>, cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    Ok(match data {
        Some(p) if p.is_dir() => read_jsonl(&p.join(experiment::EVAL_FILE))?,
        Some(p) => read_jsonl(p)?,
        None => experiment::datasets_for(cfg)?.eval,
    })
}

fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    config: Option<&Path>,
    ratio: Option<f64>,
    mode: Option<Mode>,
    out: Option<&Path>,
) -> Result<u8> {
    let (run_cfg, model) = RunCheckpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if let Some(c) = config {
        let cfg = RunConfig::load(Some(c), &[])?;
        if cfg.model != model.config {
            return Err(Error::ArchitectureMismatch("configuration model block differs from the checkpoint".into()).into());
        }
    }
    let mut spec = run_cfg.data.eval_missing;
    if let Some(r) = ratio {
        spec.ratio = r;
    }
    if let Some(m) = mode {
        spec.mode = match m {
            Mode::Image => MissingMode::Image,
            Mode::Text => MissingMode::Text,
            Mode::Both => MissingMode::Both,
        };
    }
    let records = eval_records(data, &run_cfg)?;
    let result = experiment::evaluate_scenario(&model, &records, &spec, experiment::mask_seed(&run_cfg, "eval"))?;
    let json = serde_json::to_string_pretty(&result)?;
    println!("{json}");
    if let Some(o) = out {
        experiment::write_json(&result, o)?;
    }
    Ok(0)
}

fn merge(checkpoint: &Path, out: &Path, report: Option<PathBuf>) -> Result<u8> {
    let (cfg, model) = RunCheckpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let merged = model.merge_all(mora::seed::derive_seed(cfg.seed, "merge", 0))?;
    let worst = merged
        .merges
        .iter()
        .map(|m| m.max_relative_deviation)
        .fold(0.0, f64::max);
    let cert = serde_json::json!({
        "format_version": mora::codec::FORMAT_VERSION,
        "merged_weights": merged.merges.len(),
        "max_relative_deviation": worst,
        "tolerance": mora::adapters::MERGE_TOLERANCE,
        "merges": merged.merges,
    });
    experiment::write_json(&RunCheckpoint::new(&cfg, &merged), out)?;
    let report = report.unwrap_or_else(|| out.with_extension("certification.json"));
    experiment::write_json(&cert, &report)?;
    println!("merged {} weights; max relative deviation {worst:.3e}", merged.merges.len());
    let remaining = merged.adapters.as_ref().map_or(0, |a| a.trainable_parameter_count());
    println!("adapter parameters after merge: {remaining}");
    println!("wrote {} and {}", out.display(), report.display());
    Ok(0)
}

fn analyze(checkpoint: &Path, base: Option<&Path>, data: Option<&Path>, kind: Kind, out: &Path) -> Result<u8> {
    let (cfg, model) = RunCheckpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    std::fs::create_dir_all(out)?;
    match kind {
        Kind::Spectrum => {
            let reports = analysis::spectrum(&model)?;
            experiment::write_json(&reports, &out.join("spectrum.json"))?;
            analysis::write_spectrum_csv(&reports, &out.join("spectrum.csv"))?;
            println!("{} spectra", reports.len());
        }
        Kind::Intermodal => {
            let records = eval_records(data, &cfg)?;
            let report = analysis::inter_modal(&model, &records)?;
            experiment::write_json(&report, &out.join("intermodal.json"))?;
            analysis::write_inter_modal_csv(&report, &out.join("intermodal.csv"))?;
            println!("mean L2 {:.4}, mean angle {:.2} deg", report.mean_l2, report.mean_angle_deg);
        }
        Kind::Drift => {
            let reference = match base {
                Some(b) => RunCheckpoint::load(b).with_context(|| format!("loading {}", b.display()))?.1,
                None => model.base(),
            };
            if reference.frozen_checksum() != model.base().frozen_checksum() && !model.merged {
                return Err(Error::ArchitectureMismatch("base checkpoint has different frozen towers".into()).into());
            }
            let records = eval_records(data, &cfg)?;
            let report = analysis::drift(&model, &reference, &records)?;
            experiment::write_json(&report, &out.join("drift.json"))?;
            analysis::write_drift_csv(&report, &out.join("drift.csv"))?;
            println!(
                "vision shift {:.3e} ({:.3e} deg), text shift {:.3e} ({:.3e} deg)",
                report.vision.mean_l2, report.vision.mean_angle_deg, report.text.mean_l2, report.text.mean_angle_deg
            );
        }
        Kind::Embeddings => {
            let records = eval_records(data, &cfg)?;
            let rows = analysis::write_embeddings_csv(&model, &records, &out.join("embeddings.csv"))?;
            println!("{rows} rows");
        }
    }
    println!("wrote {}", out.display());
    Ok(0)
}

fn sweep(cfg: &RunConfig, axis: &str, values: &[String], out: Option<PathBuf>) -> Result<u8> {
    let axis: SweepAxis = axis.parse()?;
    let values: Vec<String> = values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!(Error::Config("sweep needs at least one value".into()));
    }
    let rows = experiment::sweep(cfg, axis, &values)?;
    let path = out.unwrap_or_else(|| Path::new(&cfg.output_dir).join(format!("sweep_{}.csv", experiment::axis_name(axis))));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    experiment::write_sweep_csv(&rows, &path)?;
    for r in &rows {
        match &r.error {
            None => println!("{}={}: missing headline {:.4}", r.axis, r.value, r.missing_headline.unwrap_or(f64::NAN)),
            Some(e) => println!("{}={}: failed: {e}", r.axis, r.value),
        }
    }
    println!("wrote {}", path.display());
    Ok(if rows.iter().any(|r| r.error.is_some()) { 1 } else { 0 })
}

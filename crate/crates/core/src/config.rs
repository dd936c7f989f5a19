//! Run configuration: one JSON document plus `a.b.c=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::AdapterConfig;
use crate::data::{GeneratorSpec, MissingSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::train::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `generator.samples` is the training split size.
    pub generator: GeneratorSpec,
    pub val_samples: usize,
    pub eval_samples: usize,
    /// Applied to the train and validation splits.
    pub train_missing: MissingSpec,
    /// Applied to the evaluation split at evaluation time.
    pub eval_missing: MissingSpec,
    /// Dataset directory written by `gen-data`; generated in memory when absent.
    pub dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            val_samples: 250,
            eval_samples: 500,
            train_missing: MissingSpec::default(),
            eval_missing: MissingSpec::default(),
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    /// Master seed for the frozen towers and missing-modality masks.
    pub seed: u64,
    /// Replicate index; varies adapter initialization and batch order only.
    pub replicate: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            replicate: 0,
            output_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with the JSON file at `path` (if any), then with
    /// each `dotted.path=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?;
            merge_into(&mut value, file, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let g = &self.data.generator;
        m.validate()?;
        g.validate()?;
        self.optim.validate()?;
        self.data.train_missing.validate()?;
        self.data.eval_missing.validate()?;
        self.adapter
            .validate(m.vision.width, m.text.width, m.vision.depth, m.text.depth)?;
        let mismatch = |what: &str| Err(Error::Config(format!("model and generator disagree on {what}")));
        if g.classes != m.classes {
            return mismatch("the number of classes");
        }
        if g.f_v != m.vision_features || g.seq_v > m.vision.max_seq_len {
            return mismatch("the vision feature shape");
        }
        if g.text_len + 1 > m.text.max_seq_len || g.vocab_size > m.vocab_size {
            return mismatch("the text length or vocabulary");
        }
        if g.multilabel != (m.task == Task::Multilabel) {
            return mismatch("multi-label mode");
        }
        if self.data.val_samples != 0 && self.data.val_samples < g.classes {
            return Err(Error::Config("val_samples must be 0 or at least the class count".into()));
        }
        if self.data.eval_samples < g.classes {
            return Err(Error::Config("eval_samples must be at least the class count".into()));
        }
        Ok(())
    }
}

fn merge_into(base: &mut Value, overlay: Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge_into(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown config key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Sets one dotted path. The value is parsed as JSON when possible and
/// taken as a string otherwise, so `adapter.variant=no_gram` works unquoted.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Variant;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::load(None, &["adapter.rank=8".into(), "adapter.variant=no_gram".into()]).unwrap();
        assert_eq!(c.adapter.rank, 8);
        assert_eq!(c.adapter.variant, Variant::NoGram);
        assert!(RunConfig::load(None, &["adapter.bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["adapter.rank".into()]).is_err());
        assert!(matches!(
            RunConfig::load(None, &["adapter.rank=100".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_file_keeps_nested_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"text": {"depth": 4}}, "seed": 7}"#).unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.text.width, 48);
        std::fs::write(&p, r#"{"model": {"nope": 1}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
        assert!(RunConfig::load(Some(&dir.path().join("missing.json")), &[]).is_err());
    }
}

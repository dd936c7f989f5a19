//! Synthetic paired vision/text data, the missing-modality protocol and
//! JSONL persistence.
//!
//! Every sample has a latent vector drawn around its class prototype. The
//! vision payload is a fixed linear map of the latent with additive noise,
//! reshaped into `seq_v × f_v` "patch" features. The text payload quantizes
//! a second fixed linear map of the latent into per-position token bins.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    Complete,
    /// Text only.
    ImageMissing,
    /// Image only.
    TextMissing,
}

impl Mask {
    pub fn has_vision(self) -> bool {
        self != Mask::ImageMissing
    }

    pub fn has_text(self) -> bool {
        self != Mask::TextMissing
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub vision: Option<Tensor>,
    pub text: Option<Vec<u32>>,
    pub label: Vec<u8>,
    pub mask: Mask,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSample(format!("record {}: {m}", self.id)));
        match (self.mask, self.vision.is_some(), self.text.is_some()) {
            (Mask::Complete, true, true) | (Mask::ImageMissing, false, true) | (Mask::TextMissing, true, false) => {}
            (mask, v, t) => {
                return bad(&format!(
                    "mask {mask:?} inconsistent with payloads (vision present: {v}, text present: {t})"
                ))
            }
        }
        if self.label.iter().any(|&l| l > 1) {
            return bad("label entries must be 0 or 1");
        }
        if !self.label.contains(&1) {
            return bad("label has no active class");
        }
        Ok(())
    }

    /// Index of the first active class.
    pub fn class(&self) -> usize {
        self.label.iter().position(|&l| l == 1).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub samples: usize,
    pub latent_dim: usize,
    /// Deviation of a latent around its prototype.
    pub noise: f64,
    /// Deviation of additive noise on the vision features.
    pub vision_noise: f64,
    /// Deviation of noise added before the text quantizer.
    pub text_noise: f64,
    pub vocab_size: usize,
    pub seq_v: usize,
    pub f_v: usize,
    pub text_len: usize,
    /// Multi-hot labels: each sample may carry a second class.
    pub multilabel: bool,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 2000,
            latent_dim: 8,
            noise: 0.1,
            vision_noise: 1.0,
            text_noise: 1.0,
            vocab_size: 256,
            seq_v: 16,
            f_v: 16,
            text_len: 11,
            multilabel: false,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples < self.classes {
            return err(format!("samples {} fewer than classes {}", self.samples, self.classes));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("vision_noise", self.vision_noise),
            ("text_noise", self.text_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and non-negative"));
            }
        }
        if self.latent_dim == 0 || self.seq_v == 0 || self.f_v == 0 || self.text_len == 0 {
            return err("latent_dim, seq_v, f_v and text_len must be positive".into());
        }
        if self.bins() < 2 {
            return err(format!(
                "vocab_size {} leaves fewer than 2 bins per text position",
                self.vocab_size
            ));
        }
        Ok(())
    }

    /// Token bins per text position; id 0 is reserved.
    pub fn bins(&self) -> usize {
        self.vocab_size.saturating_sub(1) / self.text_len.max(1)
    }
}

/// Fixed generator state: prototypes and modality maps.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    prototypes: Tensor,
    vision_map: Tensor,
    text_map: Tensor,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.latent_dim;
        let mut rng = seed::derived_rng(spec.seed, "generator", 0);
        let prototypes = Tensor::randn(spec.classes, k, 1.0, &mut rng);
        let vision_map = Tensor::randn(k, spec.seq_v * spec.f_v, 1.0 / (k as f64).sqrt(), &mut rng);
        let text_map = Tensor::randn(k, spec.text_len, 1.0 / (k as f64).sqrt(), &mut rng);
        Ok(Self {
            spec: spec.clone(),
            prototypes,
            vision_map,
            text_map,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// `n` class-balanced complete samples with ids `first_id..`, plus their
    /// latents (n×latent_dim).
    pub fn sample_with_latents(&self, n: usize, stream: u64, first_id: u64) -> Result<(Vec<SampleRecord>, Tensor)> {
        let s = &self.spec;
        if n < s.classes {
            return Err(Error::Spec(format!("samples {n} fewer than classes {}", s.classes)));
        }
        let mut rng = seed::derived_rng(s.seed, "samples", stream);
        let mut classes: Vec<usize> = (0..n).map(|i| i % s.classes).collect();
        classes.shuffle(&mut rng);

        let k = s.latent_dim;
        let bins = s.bins();
        let mut records = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n * k);
        for (i, &class) in classes.iter().enumerate() {
            let mut label = vec![0u8; s.classes];
            label[class] = 1;
            let mut center = self.prototypes.row(class).to_vec();
            if s.multilabel && rng.random::<f64>() < 0.3 {
                let other = (class + 1 + rng.random_range(0..s.classes - 1)) % s.classes;
                label[other] = 1;
                for (c, p) in center.iter_mut().zip(self.prototypes.row(other)) {
                    *c = 0.5 * (*c + p);
                }
            }
            let noise = Tensor::randn(1, k, s.noise, &mut rng);
            let z: Vec<f64> = center.iter().zip(noise.data()).map(|(c, e)| c + e).collect();
            let z = Tensor::from_raw(1, k, z);

            let mut vision = z.matmul(&self.vision_map)?;
            let vn = Tensor::randn(1, s.seq_v * s.f_v, s.vision_noise, &mut rng);
            vision.add_assign(&vn);
            let vision = Tensor::from_raw(s.seq_v, s.f_v, vision.into_vec());

            let proj = z.matmul(&self.text_map)?;
            let tn = Tensor::randn(1, s.text_len, s.text_noise, &mut rng);
            let text = proj
                .data()
                .iter()
                .zip(tn.data())
                .enumerate()
                .map(|(pos, (p, e))| {
                    let u = 0.5 * ((p + e).tanh() + 1.0);
                    let bin = ((u * bins as f64) as usize).min(bins - 1);
                    (1 + pos * bins + bin) as u32
                })
                .collect();

            latents.extend_from_slice(z.data());
            records.push(SampleRecord {
                id: first_id + i as u64,
                vision: Some(vision),
                text: Some(text),
                label,
                mask: Mask::Complete,
            });
        }
        Ok((records, Tensor::from_raw(n, k, latents)))
    }

    pub fn sample(&self, n: usize, stream: u64, first_id: u64) -> Result<Vec<SampleRecord>> {
        Ok(self.sample_with_latents(n, stream, first_id)?.0)
    }

    /// Class of the nearest prototype for each latent row.
    pub fn nearest_prototype(&self, latents: &Tensor) -> Vec<usize> {
        (0..latents.rows())
            .map(|i| {
                let z = latents.row(i);
                (0..self.spec.classes)
                    .map(|c| {
                        let d: f64 = z.iter().zip(self.prototypes.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                        (c, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(c, _)| c)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// `spec.samples` complete records drawn from stream 0.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<SampleRecord>> {
    Generator::new(spec)?.sample(spec.samples, 0, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    Image,
    Text,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingSpec {
    /// Percent of samples with one modality absent.
    pub ratio: f64,
    pub mode: MissingMode,
}

impl Default for MissingSpec {
    fn default() -> Self {
        Self {
            ratio: 70.0,
            mode: MissingMode::Both,
        }
    }
}

impl MissingSpec {
    pub fn complete() -> Self {
        Self {
            ratio: 0.0,
            mode: MissingMode::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.ratio) {
            return Err(Error::Spec(format!("missing ratio {} outside [0, 100]", self.ratio)));
        }
        Ok(())
    }
}

/// Exact per-mask counts for `n` records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub complete: usize,
    pub image_missing: usize,
    pub text_missing: usize,
}

impl MaskCounts {
    pub fn of(records: &[SampleRecord]) -> Self {
        let mut c = Self {
            complete: 0,
            image_missing: 0,
            text_missing: 0,
        };
        for r in records {
            match r.mask {
                Mask::Complete => c.complete += 1,
                Mask::ImageMissing => c.image_missing += 1,
                Mask::TextMissing => c.text_missing += 1,
            }
        }
        c
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Counts `apply_missing` produces for `n` records.
///
/// Each side rounds half up. When both sides round up past `n` (odd `n` at
/// 100%), the image-missing side takes what is left.
pub fn missing_counts(n: usize, spec: &MissingSpec) -> Result<MaskCounts> {
    spec.validate()?;
    let nf = n as f64;
    let (text_missing, image_missing) = match spec.mode {
        MissingMode::Both => {
            let k = round_half_up(nf * spec.ratio / 200.0).min(n);
            (k, k.min(n - k))
        }
        MissingMode::Image => (0, round_half_up(nf * spec.ratio / 100.0).min(n)),
        MissingMode::Text => (round_half_up(nf * spec.ratio / 100.0).min(n), 0),
    };
    Ok(MaskCounts {
        complete: n - text_missing - image_missing,
        image_missing,
        text_missing,
    })
}

/// Masks a seeded random subset of complete records. Masked payloads become `None`.
pub fn apply_missing(records: &[SampleRecord], spec: &MissingSpec, seed: u64) -> Result<Vec<SampleRecord>> {
    if let Some(r) = records.iter().find(|r| r.mask != Mask::Complete) {
        return Err(Error::Contract(format!("record {} is already masked", r.id)));
    }
    let counts = missing_counts(records.len(), spec)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut out = records.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        let r = &mut out[i];
        if rank < counts.text_missing {
            r.mask = Mask::TextMissing;
            r.text = None;
        } else if rank < counts.text_missing + counts.image_missing {
            r.mask = Mask::ImageMissing;
            r.vision = None;
        }
    }
    Ok(out)
}

pub fn write_jsonl(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Sidecar describing how a dataset file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub generator: GeneratorSpec,
    pub splits: Vec<SplitMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub name: String,
    pub file: String,
    pub stream: u64,
    pub missing: MissingSpec,
    pub missing_seed: u64,
    pub counts: MaskCounts,
}

impl DatasetMeta {
    pub fn new(generator: GeneratorSpec, splits: Vec<SplitMeta>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generator,
            splits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            samples: 40,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn balanced_classes() {
        let spec = GeneratorSpec {
            samples: 400,
            ..GeneratorSpec::default()
        };
        let recs = generate(&spec).unwrap();
        let mut counts = [0; 4];
        for r in &recs {
            counts[r.class()] += 1;
            r.validate().unwrap();
        }
        assert_eq!(counts, [100; 4]);
    }

    #[test]
    fn too_few_samples_is_spec_error() {
        let spec = GeneratorSpec {
            samples: 3,
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn tokens_stay_in_vocabulary() {
        let spec = small();
        for r in generate(&spec).unwrap() {
            let text = r.text.unwrap();
            assert_eq!(text.len(), spec.text_len);
            assert!(text.iter().all(|&t| t >= 1 && (t as usize) < spec.vocab_size));
        }
    }

    #[test]
    fn nearest_prototype_oracle_on_default_noise() {
        let spec = GeneratorSpec::default();
        let g = Generator::new(&spec).unwrap();
        let (recs, z) = g.sample_with_latents(2000, 0, 0).unwrap();
        let pred = g.nearest_prototype(&z);
        let hits = recs.iter().zip(&pred).filter(|(r, &p)| r.class() == p).count();
        assert!(hits as f64 / 2000.0 >= 0.99);
    }

    #[test]
    fn missing_examples() {
        let recs = generate(&GeneratorSpec {
            samples: 1000,
            ..small()
        })
        .unwrap();
        let masked = apply_missing(&recs, &MissingSpec::default(), 3).unwrap();
        let c = MaskCounts::of(&masked);
        assert_eq!((c.image_missing, c.text_missing, c.complete), (350, 350, 300));
        for r in &masked {
            r.validate().unwrap();
        }

        let ten = &recs[..10];
        let img = MissingSpec {
            ratio: 50.0,
            mode: MissingMode::Image,
        };
        let c = MaskCounts::of(&apply_missing(ten, &img, 0).unwrap());
        assert_eq!((c.image_missing, c.complete), (5, 5));
        let none = apply_missing(ten, &MissingSpec::complete(), 0).unwrap();
        assert_eq!(MaskCounts::of(&none).complete, 10);

        let bad = MissingSpec {
            ratio: 101.0,
            mode: MissingMode::Both,
        };
        assert!(matches!(apply_missing(ten, &bad, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn odd_total_at_full_ratio_stays_within_budget() {
        let spec = MissingSpec {
            ratio: 100.0,
            mode: MissingMode::Both,
        };
        let c = missing_counts(1001, &spec).unwrap();
        assert_eq!((c.text_missing, c.image_missing, c.complete), (501, 500, 0));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = apply_missing(&generate(&small()).unwrap(), &MissingSpec::default(), 1).unwrap();
        write_jsonl(&recs, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), recs);

        std::fs::write(&path, "").unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());

        let mut bad = recs.iter().find(|r| r.mask == Mask::Complete).unwrap().clone();
        bad.mask = Mask::ImageMissing;
        let line = serde_json::to_string(&bad).unwrap();
        std::fs::write(&path, format!("{}\n{line}\n", serde_json::to_string(&recs[0]).unwrap())).unwrap();
        match read_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }
}

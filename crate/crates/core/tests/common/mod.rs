#![allow(dead_code)]

use mora::adapters::{AdapterConfig, Variant};
use mora::config::RunConfig;
use mora::data::{apply_missing, Generator, MissingSpec, SampleRecord};
use mora::model::DualEncoderModel;
use mora::Tensor;
use rand::Rng;

/// Desk-scale model with fresh adapters of the given variant.
pub fn desk_model(variant: Variant, seed: u64) -> DualEncoderModel {
    let cfg = RunConfig::default();
    let mut m = DualEncoderModel::new(cfg.model.clone(), 11).unwrap();
    m.attach(
        AdapterConfig {
            variant,
            ..cfg.adapter.clone()
        },
        seed,
    )
    .unwrap();
    m
}

/// Moves every trainable tensor away from its initialization so no factor
/// sits at zero.
pub fn randomize<R: Rng>(model: &mut DualEncoderModel, rng: &mut R) {
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.params_mut()) {
        let (r, c) = t.shape();
        let tail = name.rsplit('.').next().unwrap_or("");
        *t = if tail.starts_with("alpha") {
            t.scale(rng.random_range(0.5..1.5))
        } else if tail == "G" {
            Tensor::identity(r).add(&Tensor::randn(r, c, 0.3, rng)).unwrap()
        } else if tail.starts_with('S') {
            Tensor::randn(r, c, 0.1, rng)
        } else if tail.starts_with('B') {
            Tensor::randn(r, c, 0.05, rng)
        } else if tail.starts_with('A') {
            t.add(&Tensor::randn(r, c, 0.05, rng)).unwrap()
        } else {
            Tensor::randn(r, c, 0.3, rng)
        };
    }
}

/// Desk-scale records with all three mask kinds.
pub fn mixed_records(n: usize, stream: u64) -> Vec<SampleRecord> {
    let cfg = RunConfig::default();
    let g = Generator::new(&cfg.data.generator).unwrap();
    let recs = g.sample(n, stream, 0).unwrap();
    apply_missing(&recs, &MissingSpec::default(), stream).unwrap()
}

pub fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

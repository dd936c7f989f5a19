//! Missing-modality protocol and dataset persistence.

use mora::data::{
    apply_missing, generate, read_jsonl, write_jsonl, GeneratorSpec, Mask, MaskCounts, MissingMode, MissingSpec,
    SampleRecord,
};
use mora::Tensor;
use proptest::prelude::*;

fn plain(n: usize) -> Vec<SampleRecord> {
    (0..n as u64)
        .map(|id| SampleRecord {
            id,
            vision: Some(Tensor::full(1, 2, id as f64)),
            text: Some(vec![1, 2]),
            label: vec![1, 0],
            mask: Mask::Complete,
        })
        .collect()
}

/// Integer form of round-half-up on `n·η/100` split per mode.
fn expected(n: usize, eta: usize, mode: MissingMode) -> (usize, usize) {
    let half_up = |num: usize, den: usize| (2 * num + den) / (2 * den);
    match mode {
        MissingMode::Both => {
            let k = half_up(n * eta, 200);
            (k, k.min(n - k))
        }
        MissingMode::Image => (0, half_up(n * eta, 100)),
        MissingMode::Text => (half_up(n * eta, 100), 0),
    }
}

fn mode() -> impl Strategy<Value = MissingMode> {
    prop_oneof![Just(MissingMode::Both), Just(MissingMode::Image), Just(MissingMode::Text)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mask_counts_are_exact(n in 0usize..1500, eta in 0usize..=100, mode in mode(), s in any::<u64>()) {
        let spec = MissingSpec { ratio: eta as f64, mode };
        let out = apply_missing(&plain(n), &spec, s).unwrap();
        let c = MaskCounts::of(&out);
        let (text, image) = expected(n, eta, mode);
        prop_assert_eq!((c.text_missing, c.image_missing), (text, image));
        prop_assert_eq!(c.complete + c.text_missing + c.image_missing, n);
        for r in &out {
            prop_assert!(r.vision.is_some() || r.text.is_some());
            r.validate().unwrap();
        }
        prop_assert_eq!(&out, &apply_missing(&plain(n), &spec, s).unwrap());
    }

    #[test]
    fn jsonl_round_trip(
        rows in proptest::collection::vec(
            (proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 6),
             proptest::collection::vec(0u32..1000, 0..5), 0u8..3),
            0..20),
    ) {
        let recs: Vec<SampleRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (v, t, m))| {
                let mask = [Mask::Complete, Mask::ImageMissing, Mask::TextMissing][m as usize];
                SampleRecord {
                    id: i as u64,
                    vision: mask.has_vision().then(|| Tensor::new(2, 3, v).unwrap()),
                    text: mask.has_text().then_some(t),
                    label: vec![0, 1, 1],
                    mask,
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&recs, &path).unwrap();
        prop_assert_eq!(read_jsonl(&path).unwrap(), recs);
    }
}

#[test]
fn remasking_is_independent_of_the_training_mask() {
    let spec = GeneratorSpec {
        samples: 200,
        ..GeneratorSpec::default()
    };
    let a = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    let image_only = MissingSpec {
        ratio: 30.0,
        mode: MissingMode::Image,
    };
    let m1 = apply_missing(&a, &MissingSpec::default(), 1).unwrap();
    let m2 = apply_missing(&a, &image_only, 1).unwrap();
    assert_ne!(m1, m2);
    assert_eq!(MaskCounts::of(&m2).image_missing, 60);
    assert!(apply_missing(&m1, &image_only, 1).is_err());
}

#[test]
fn headline_configuration() {
    let c = MaskCounts::of(&apply_missing(&plain(1000), &MissingSpec::default(), 0).unwrap());
    assert_eq!((c.text_missing, c.image_missing, c.complete), (350, 350, 300));
}

#[test]
fn malformed_lines_are_rejected_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut recs = plain(2);
    recs[1].mask = Mask::ImageMissing;
    write_jsonl(&recs, &path).unwrap();
    let err = read_jsonl(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    std::fs::write(&path, "").unwrap();
    assert!(read_jsonl(&path).unwrap().is_empty());
}

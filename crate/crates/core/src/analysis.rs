//! Diagnostics: Gram and weight spectra, inter-modal geometry and embedding
//! drift. All embeddings are taken in the shared (post-projection) space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{MatrixKind, Side, SiteId};
use crate::codec::FORMAT_VERSION;
use crate::data::{Mask, SampleRecord};
use crate::error::{Error, Result};
use crate::linalg::{gram, singular_values, sym_eigvals};
use crate::model::DualEncoderModel;
use crate::tensor::Tensor;

pub const EMBEDDING_SPACE: &str = "shared space, after projection";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub site: SiteId,
    pub side: Side,
    /// Eigenvalues of `S·Sᵀ` for this side's shared factor, descending.
    pub gram_raw: Vec<f64>,
    /// `gram_raw` divided by its largest value and clamped to [0, 1].
    pub gram_normalized: Vec<f64>,
    pub gram_degenerate: bool,
    pub weight_normalized: Vec<f64>,
    pub weight_degenerate: bool,
}

/// Divides by the first (largest) value; all zeros when that is not positive.
pub fn max_normalize(values: &[f64]) -> (Vec<f64>, bool) {
    match values.first() {
        Some(&top) if top > 0.0 => (values.iter().map(|v| (v / top).clamp(0.0, 1.0)).collect(), false),
        _ => (vec![0.0; values.len()], true),
    }
}

pub fn spectrum(model: &DualEncoderModel) -> Result<Vec<SpectrumReport>> {
    let mut out = Vec::new();
    let Some(set) = &model.adapters else {
        return Ok(out);
    };
    for pair in &set.pairs {
        for side in [Side::Vision, Side::Text] {
            let gram_raw = match &pair.shared {
                Some(sh) => {
                    let s = if side == Side::Vision { &sh.s_v } else { &sh.s_t };
                    gram(s)?.eigenvalues()
                }
                None => Vec::new(),
            };
            let (gram_normalized, gram_degenerate) = max_normalize(&gram_raw);
            let (weight_normalized, weight_degenerate) = max_normalize(&singular_values(pair.frozen(side)));
            out.push(SpectrumReport {
                site: pair.site,
                side,
                gram_raw,
                gram_normalized,
                gram_degenerate,
                weight_normalized,
                weight_degenerate,
            });
        }
    }
    Ok(out)
}

/// Eigenvalues of the coupling matrix a side actually receives.
pub fn coupling_eigenvalues(model: &DualEncoderModel, side: Side) -> Result<Vec<Vec<f64>>> {
    let Some(set) = &model.adapters else {
        return Ok(Vec::new());
    };
    set.pairs
        .iter()
        .filter_map(|p| p.coupling_matrix(side))
        .map(|g| sym_eigvals(&g))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance and angle in degrees between two vectors.
pub fn distance_and_angle(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm embedding".into()));
    }
    let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    // 2·atan2(|â − b̂|, |â + b̂|) stays accurate near 0° and 180° where acos does not
    let (mut minus, mut plus) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        minus += (u - v) * (u - v);
        plus += (u + v) * (u + v);
    }
    let angle = 2.0 * minus.sqrt().atan2(plus.sqrt());
    Ok((dist, angle.to_degrees().clamp(0.0, 180.0)))
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGeometry {
    pub class: usize,
    pub count: usize,
    pub mean_l2: f64,
    pub mean_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterModalReport {
    pub format_version: u32,
    pub embedding_space: String,
    /// Dataset-level values are the mean of the class means.
    pub aggregation: String,
    pub classes: Vec<ClassGeometry>,
    pub mean_l2: f64,
    pub mean_angle_deg: f64,
}

/// Per-class paired distance and angle from precomputed embeddings.
pub fn inter_modal_from(vision: &Tensor, text: &Tensor, classes: &[usize]) -> Result<InterModalReport> {
    if vision.shape() != text.shape() || vision.rows() != classes.len() || classes.is_empty() {
        return Err(Error::Contract("embeddings and classes disagree or are empty".into()));
    }
    let n_classes = classes.iter().max().map_or(0, |m| m + 1);
    let mut dists = vec![Vec::new(); n_classes];
    let mut angles = vec![Vec::new(); n_classes];
    for (i, &c) in classes.iter().enumerate() {
        let (d, a) = distance_and_angle(vision.row(i), text.row(i))?;
        dists[c].push(d);
        angles[c].push(a);
    }
    let per_class: Vec<ClassGeometry> = (0..n_classes)
        .filter(|&c| !dists[c].is_empty())
        .map(|c| ClassGeometry {
            class: c,
            count: dists[c].len(),
            mean_l2: stable_mean(dists[c].clone()),
            mean_angle_deg: stable_mean(angles[c].clone()),
        })
        .collect();
    Ok(InterModalReport {
        format_version: FORMAT_VERSION,
        embedding_space: EMBEDDING_SPACE.into(),
        aggregation: "macro".into(),
        mean_l2: stable_mean(per_class.iter().map(|c| c.mean_l2).collect()),
        mean_angle_deg: stable_mean(per_class.iter().map(|c| c.mean_angle_deg).collect()),
        classes: per_class,
    })
}

/// Vision/text geometry on complete records, grouped by first active class.
pub fn inter_modal(model: &DualEncoderModel, records: &[SampleRecord]) -> Result<InterModalReport> {
    if let Some(r) = records.iter().find(|r| r.mask != Mask::Complete) {
        return Err(Error::Contract(format!("record {} is not complete", r.id)));
    }
    if records.is_empty() {
        return Err(Error::Contract("no records".into()));
    }
    let (v, t) = model.embeddings(records)?;
    let classes: Vec<usize> = records.iter().map(SampleRecord::class).collect();
    inter_modal_from(&v, &t, &classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub mean_l2: f64,
    pub mean_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub format_version: u32,
    pub embedding_space: String,
    pub vision: Shift,
    pub text: Shift,
}

fn shift(adapted: &Tensor, base: &Tensor) -> Result<Shift> {
    if adapted.shape() != base.shape() || adapted.rows() == 0 {
        return Err(Error::Contract("embedding sets disagree or are empty".into()));
    }
    let mut d = Vec::with_capacity(adapted.rows());
    let mut a = Vec::with_capacity(adapted.rows());
    for i in 0..adapted.rows() {
        let (di, ai) = distance_and_angle(adapted.row(i), base.row(i))?;
        d.push(di);
        a.push(ai);
    }
    Ok(Shift {
        mean_l2: stable_mean(d),
        mean_angle_deg: stable_mean(a),
    })
}

pub fn drift_from(adapted: (&Tensor, &Tensor), base: (&Tensor, &Tensor)) -> Result<DriftReport> {
    Ok(DriftReport {
        format_version: FORMAT_VERSION,
        embedding_space: EMBEDDING_SPACE.into(),
        vision: shift(adapted.0, base.0)?,
        text: shift(adapted.1, base.1)?,
    })
}

/// Per-modality shift of each sample's embedding between two models with
/// the same frozen towers.
pub fn drift(adapted: &DualEncoderModel, base: &DualEncoderModel, records: &[SampleRecord]) -> Result<DriftReport> {
    if records.is_empty() {
        return Err(Error::Contract("no records".into()));
    }
    if adapted.config != base.config {
        return Err(Error::ArchitectureMismatch("models have different configurations".into()));
    }
    let (av, at) = adapted.embeddings(records)?;
    let (bv, bt) = base.embeddings(records)?;
    drift_from((&av, &at), (&bv, &bt))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(";")
}

fn kind_name(kind: MatrixKind) -> String {
    format!("{kind:?}")
}

pub fn write_spectrum_csv(reports: &[SpectrumReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "site",
        "vision_layer",
        "text_layer",
        "kind",
        "side",
        "gram_degenerate",
        "gram_normalized",
        "weight_normalized",
    ])?;
    for r in reports {
        w.write_record([
            r.site.index.to_string(),
            r.site.vision_layer.to_string(),
            r.site.text_layer.to_string(),
            kind_name(r.site.kind),
            r.side.name().to_string(),
            r.gram_degenerate.to_string(),
            join(&r.gram_normalized),
            join(&r.weight_normalized),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_inter_modal_csv(report: &InterModalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "count", "mean_l2", "mean_angle_deg"])?;
    for c in &report.classes {
        w.write_record([
            c.class.to_string(),
            c.count.to_string(),
            c.mean_l2.to_string(),
            c.mean_angle_deg.to_string(),
        ])?;
    }
    let total: usize = report.classes.iter().map(|c| c.count).sum();
    w.write_record([
        "macro".to_string(),
        total.to_string(),
        report.mean_l2.to_string(),
        report.mean_angle_deg.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_drift_csv(report: &DriftReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["modality", "mean_l2", "mean_angle_deg"])?;
    for (name, s) in [("vision", report.vision), ("text", report.text)] {
        w.write_record([name.to_string(), s.mean_l2.to_string(), s.mean_angle_deg.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per record: id, first class, mask, then vision and text embeddings.
pub fn write_embeddings_csv(model: &DualEncoderModel, records: &[SampleRecord], path: &Path) -> Result<usize> {
    let (v, t) = model.embeddings(records)?;
    let d = v.cols();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "class".to_string(), "mask".to_string()];
    header.extend((0..d).map(|i| format!("v{i}")));
    header.extend((0..d).map(|i| format!("t{i}")));
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mask = serde_json::to_value(r.mask)?;
        let mut row = vec![r.id.to_string(), r.class().to_string(), mask.as_str().unwrap_or("").to_string()];
        row.extend(v.row(i).iter().map(f64::to_string));
        row.extend(t.row(i).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_have_no_gap() {
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]).unwrap();
        let r = inter_modal_from(&v, &v, &[0, 1]).unwrap();
        assert_eq!(r.mean_l2, 0.0);
        assert_eq!(r.mean_angle_deg, 0.0);
    }

    #[test]
    fn orthogonal_unit_embeddings() {
        let v = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        let r = inter_modal_from(&v, &t, &[0]).unwrap();
        assert!((r.mean_l2 - 2f64.sqrt()).abs() < 1e-15);
        assert!((r.mean_angle_deg - 90.0).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let v = Tensor::zeros(1, 2);
        let t = Tensor::ones(1, 2);
        assert!(matches!(inter_modal_from(&v, &t, &[0]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn doubled_embeddings_drift() {
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[1.0, 0.0]]).unwrap();
        let a = b.scale(2.0);
        let r = drift_from((&a, &a), (&b, &b)).unwrap();
        assert!(r.vision.mean_angle_deg.abs() < 1e-6);
        assert!((r.vision.mean_l2 - 3.0).abs() < 1e-15);
        let swapped = drift_from((&b, &b), (&a, &a)).unwrap();
        assert_eq!(swapped.vision.mean_l2, r.vision.mean_l2);
    }

    #[test]
    fn normalization() {
        assert_eq!(max_normalize(&[4.0, 2.0, 0.0]), (vec![1.0, 0.5, 0.0], false));
        assert_eq!(max_normalize(&[0.0, 0.0]), (vec![0.0, 0.0], true));
    }
}

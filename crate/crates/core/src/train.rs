//! AdamW with warmup-cosine schedule, task losses, metrics and the
//! training loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{self, FORMAT_VERSION};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, Prepared, Task};
use crate::seed;
use crate::tensor::Tensor;

use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub early_stop_patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 20,
            warmup_fraction: 0.1,
            early_stop_patience: 3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("eps, batch_size and early_stop_patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warmup over `⌈warmup_fraction·total⌉` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > total {
        return Err(Error::Contract(format!("step {step} beyond total {total}")));
    }
    let warm = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return Ok(cfg.lr * step as f64 / warm as f64);
    }
    if step == total {
        return Ok(if warm == total && total > 0 { cfg.lr } else { 0.0 });
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moments for each parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW update: `p ← p·(1 − lr·wd)` followed by the bias-corrected
/// Adam step. Gradients are checked before anything is modified.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.all_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn first_active(label: &[u8]) -> Result<usize> {
    label
        .iter()
        .position(|&l| l == 1)
        .ok_or_else(|| Error::Contract("label has no active class".into()))
}

/// Mean task loss of a batch of logits on a tape.
pub fn loss_on(tape: &Tape, logits: Var, labels: &[&[u8]], task: Task) -> Result<Var> {
    if labels.len() != logits.rows() || labels.iter().any(|l| l.len() != logits.cols()) {
        return Err(Error::Contract(format!(
            "{} labels do not fit logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    match task {
        Task::Multiclass => {
            let targets = labels.iter().map(|l| first_active(l)).collect::<Result<Vec<_>>>()?;
            tape.softmax_cross_entropy(logits, &targets)
        }
        Task::Multilabel | Task::Binary => {
            for l in labels {
                first_active(l)?;
            }
            let data = labels.iter().flat_map(|l| l.iter().map(|&b| b as f64)).collect();
            let targets = Tensor::new(logits.rows(), logits.cols(), data)?;
            tape.sigmoid_bce(logits, &targets)
        }
    }
}

/// Loss of one C-vector of logits.
pub fn loss(logits: &Tensor, label: &[u8], task: Task) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = loss_on(&tape, x, &[label], task)?;
    Ok(tape.value(l).item())
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose top-1 prediction is an active class.
pub fn accuracy(predicted: &[usize], labels: &[Vec<u8>]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Contract("accuracy needs equal, non-empty inputs".into()));
    }
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, l)| l.get(p) == Some(&1))
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Unweighted mean of per-class F1 over multi-hot predictions; 0/0 counts as 0.
pub fn macro_f1(predicted: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<f64> {
    let c = labels.first().map(Vec::len).unwrap_or(0);
    if predicted.is_empty() || predicted.len() != labels.len() || c == 0 {
        return Err(Error::Contract("macro-F1 needs equal, non-empty inputs".into()));
    }
    let mut total = 0.0;
    for class in 0..c {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, l) in predicted.iter().zip(labels) {
            match (p[class] == 1, l[class] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / c as f64)
}

/// Area under the ROC curve by the rank-sum statistic, ties at average rank.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() || scores.is_empty() {
        return Err(Error::Contract("auroc needs equal, non-empty inputs".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Binary tasks only.
    pub auroc: Option<f64>,
}

impl Metrics {
    /// The task's headline number: macro-F1, accuracy or AUROC.
    pub fn headline(&self, task: Task) -> f64 {
        match task {
            Task::Multilabel => self.macro_f1,
            Task::Multiclass => self.accuracy,
            Task::Binary => self.auroc.unwrap_or(f64::NAN),
        }
    }
}

pub fn headline_name(task: Task) -> &'static str {
    match task {
        Task::Multilabel => "macro_f1",
        Task::Multiclass => "accuracy",
        Task::Binary => "auroc",
    }
}

/// Metrics from an n×C logit matrix. Multi-label predictions threshold each
/// logit at 0; the others take the argmax. AUROC scores a binary sample by
/// `logit₁ − logit₀`.
pub fn metrics(logits: &Tensor, labels: &[Vec<u8>], task: Task) -> Result<Metrics> {
    if logits.rows() != labels.len() || labels.iter().any(|l| l.len() != logits.cols()) {
        return Err(Error::Contract("logits and labels disagree in shape".into()));
    }
    let top: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let predicted: Vec<Vec<u8>> = match task {
        Task::Multilabel => (0..logits.rows())
            .map(|i| logits.row(i).iter().map(|&v| (v > 0.0) as u8).collect())
            .collect(),
        _ => top
            .iter()
            .map(|&p| (0..logits.cols()).map(|c| (c == p) as u8).collect())
            .collect(),
    };
    let auroc = if task == Task::Binary {
        let scores: Vec<f64> = (0..logits.rows()).map(|i| logits.get(i, 1) - logits.get(i, 0)).collect();
        let positive: Vec<bool> = labels.iter().map(|l| l[1] == 1).collect();
        Some(auroc(&scores, &positive)?)
    } else {
        None
    };
    Ok(Metrics {
        accuracy: accuracy(&top, labels)?,
        macro_f1: macro_f1(&predicted, labels)?,
        auroc,
    })
}

pub fn evaluate(model: &DualEncoderModel, records: &[SampleRecord]) -> Result<Metrics> {
    let logits = model.logits(records)?;
    let labels: Vec<Vec<u8>> = records.iter().map(|r| r.label.clone()).collect();
    metrics(&logits, &labels, model.config.task)
}

fn evaluate_prepared(model: &DualEncoderModel, prepared: &[Prepared], labels: &[Vec<u8>]) -> Result<Metrics> {
    let (logits, _, _) = model.evaluate_prepared(prepared)?;
    metrics(&logits, labels, model.config.task)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoEpochs,
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub headline_metric: String,
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every executed step.
    pub lr_trace: Vec<f64>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    /// Checksum of the trainable parameters restored at the end.
    pub best_checksum: Option<String>,
    pub stop_reason: StopReason,
}

fn params_checksum(model: &DualEncoderModel) -> String {
    let p = model.params();
    codec::checksum(p.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Trains the head and adapters of `model` in place.
///
/// The frozen prefix of both towers is computed once per record. Batches
/// are reshuffled every epoch from `seed`. With a validation set the best
/// epoch by headline metric is restored at the end; training stops after
/// `early_stop_patience` epochs without improvement.
pub fn train(
    model: &mut DualEncoderModel,
    train_records: &[SampleRecord],
    val_records: &[SampleRecord],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_records.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if model.merged {
        return Err(Error::AlreadyMerged);
    }
    let task = model.config.task;
    let mut report = TrainReport {
        format_version: FORMAT_VERSION,
        headline_metric: headline_name(task).into(),
        epochs: Vec::new(),
        lr_trace: Vec::new(),
        steps: 0,
        best_epoch: None,
        best_val_metric: None,
        best_checksum: None,
        stop_reason: StopReason::NoEpochs,
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }

    let prepared = model.prepare(train_records)?;
    let labels: Vec<&[u8]> = train_records.iter().map(|r| r.label.as_slice()).collect();
    let val_prepared = model.prepare(val_records)?;
    let val_labels: Vec<Vec<u8>> = val_records.iter().map(|r| r.label.clone()).collect();

    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut state = OptimizerState::new(model.params().into_iter().map(|(_, t)| t));
    let per_epoch = train_records.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    report.stop_reason = StopReason::Completed;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        order.shuffle(&mut seed::derived_rng(seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(report.steps + 1, total, cfg)?;
            let tape = Tape::new();
            let bound = model.bind(&tape)?;
            let inputs: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let batch_labels: Vec<&[u8]> = batch.iter().map(|&i| labels[i]).collect();
            let out = model.forward_prepared(&tape, &bound, &inputs)?;
            let loss = loss_on(&tape, out.logits, &batch_labels, task)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} at step {}", report.steps)));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound.vars.iter().map(|&v| grads.get(v)).collect();
            adamw_step(&mut model.params_mut(), &names, &g, &mut state, lr, cfg)?;
            loss_sum += value * batch.len() as f64;
            report.lr_trace.push(lr);
            report.steps += 1;
        }
        let train_loss = loss_sum / train_records.len() as f64;

        let val_metric = if val_records.is_empty() {
            None
        } else {
            Some(evaluate_prepared(model, &val_prepared, &val_labels)?.headline(task))
        };
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(b, _)| m > *b) {
                best = Some((m, model.params().into_iter().map(|(_, t)| t.clone()).collect()));
                report.best_epoch = Some(epoch);
                report.best_val_metric = Some(m);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    report.stop_reason = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    if let Some((_, snapshot)) = best {
        for (p, s) in model.params_mut().into_iter().zip(snapshot) {
            *p = s;
        }
    } else {
        report.best_epoch = report.epochs.last().map(|e| e.epoch);
    }
    report.best_checksum = Some(params_checksum(model));
    Ok(report)
}

//! Losses, Adam with linear decay, and the one-step / two-step protocols.
//!
//! Metrics are emitted as one plain-text record per line:
//!
//! ```text
//! epoch=3 phase=step2 split=test loss=0.412311 top1=0.8710
//! ```
//!
//! `phase` is `one-step`, `step1` (binary activations, real weights) or
//! `step2` (binary activations and weights). `split` is `train` (mean loss
//! and accuracy over the epoch's training batches) or `test`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binconv::WeightMode;
use crate::checkpoint::{decode_model, encode_model, load_model, save_model};
use crate::config::ModelConfig;
use crate::data::{Dataset, LabeledBatch, Splits};
use crate::error::{Error, Result};
use crate::network::{build_model, Model};
use crate::tensor::ChannelVector;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    OneStep,
    TwoStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[serde(alias = "ce")]
    CrossEntropy,
    #[serde(alias = "distill")]
    Distillation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Evaluate on the test split every this many epochs (and after the last).
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn default_lr() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    64
}
fn one() -> usize {
    1
}
fn default_protocol() -> Protocol {
    Protocol::OneStep
}
fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: default_lr(),
            batch_size: default_batch(),
            epochs: 1,
            protocol: Protocol::OneStep,
            loss: LossKind::CrossEntropy,
            teacher: None,
            seed: 0,
            weight_decay: 0.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("train.initial_lr", "must be a finite value > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be a finite value >= 0"));
        }
        if self.loss == LossKind::Distillation && self.teacher.is_none() {
            return Err(Error::config("train.teacher", "distillation needs a teacher checkpoint"));
        }
        Ok(())
    }
}

/// `initial_lr * (1 - step / total_steps)`.
pub fn linear_lr(step: u64, total_steps: u64, initial_lr: f64) -> f64 {
    assert!(step <= total_steps && total_steps > 0, "step {step} outside 0..={total_steps}");
    initial_lr * (1.0 - step as f64 / total_steps as f64)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn cross_entropy(logits: &ChannelVector, labels: &[usize]) -> Result<(f64, ChannelVector)> {
    if labels.len() != logits.n {
        return Err(Error::shape("cross_entropy labels", logits.n, labels.len()));
    }
    let n = logits.n as f64;
    let mut grad = ChannelVector::zeros(logits.n, logits.c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.c {
            return Err(Error::shape("cross_entropy label", logits.c, y));
        }
        let lp = log_softmax(logits.row(i));
        loss -= lp[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (lp[j].exp() - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// `mean_i KL(softmax(teacher_i) || softmax(student_i))`.
pub fn distillation_loss(student: &ChannelVector, teacher: &ChannelVector) -> Result<f64> {
    Ok(distillation_loss_grad(student, teacher)?.0)
}

/// Distillation loss and its gradient with respect to the student logits.
pub fn distillation_loss_grad(
    student: &ChannelVector,
    teacher: &ChannelVector,
) -> Result<(f64, ChannelVector)> {
    if (student.n, student.c) != (teacher.n, teacher.c) {
        return Err(Error::shape(
            "distillation logits",
            (teacher.n, teacher.c),
            (student.n, student.c),
        ));
    }
    let n = student.n as f64;
    let mut grad = ChannelVector::zeros(student.n, student.c);
    let mut loss = 0.0;
    for i in 0..student.n {
        let ls = log_softmax(student.row(i));
        let lt = log_softmax(teacher.row(i));
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let pt = lt[j].exp();
            if pt > 0.0 {
                loss += pt * (lt[j] - ls[j]);
            }
            *g = (ls[j].exp() - pt) / n;
        }
    }
    Ok(((loss / n).max(0.0), grad))
}

pub fn top1_correct(logits: &ChannelVector, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count()
}

/// Adam moments for every trainable parameter, in the model's visiting order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam step using the gradients accumulated in `model`, followed by
    /// the latent-weight clamp. Weight decay (L2 added to the gradient) only
    /// applies to parameters whose kind decays.
    pub fn update(&mut self, model: &mut Model, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let mut slot = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params(&mut |_, kind, p| {
            if !kind.trainable() {
                return;
            }
            if first.len() == slot {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[slot], &mut second[slot]);
            let decay = if kind.decays() { weight_decay } else { 0.0 };
            for k in 0..p.len() {
                let g = p.grad[k] + decay * p.data[k];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                p.data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPSILON);
            }
            slot += 1;
        });
        model.after_update();
    }
}

/// What a step optimizes against.
#[derive(Clone, Copy)]
pub enum Target<'a> {
    Labels,
    Teacher(&'a Model),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, loss, backward, running-statistics update and one optimizer step.
pub fn train_step(
    model: &mut Model,
    batch: &LabeledBatch,
    target: Target<'_>,
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<StepOutcome> {
    model.zero_grad();
    let (logits, cache) = model.forward(&batch.images, true)?;
    let (loss, grad) = match target {
        Target::Labels => cross_entropy(&logits, &batch.labels)?,
        Target::Teacher(t) => distillation_loss_grad(&logits, &t.predict(&batch.images)?)?,
    };
    if !loss.is_finite() {
        let stats = model.layer_stats(&batch.images, true)?;
        let diagnostics = stats.iter().map(|s| format!("  {s}")).collect::<Vec<_>>().join("\n");
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            diagnostics,
        });
    }
    let correct = top1_correct(&logits, &batch.labels);
    model.backward(&cache, &grad)?;
    model.commit_running_stats(&cache);
    opt.update(model, lr, weight_decay);
    Ok(StepOutcome { loss, correct })
}

/// Mean cross-entropy and top-1 accuracy in inference mode.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0);
    for b in data.eval_batches(batch_size) {
        let logits = model.predict(&b.images)?;
        loss += cross_entropy(&logits, &b.labels)?.0 * b.len() as f64;
        correct += top1_correct(&logits, &b.labels);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub phase: String,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} phase={} split={} loss={:.6} top1={:.4}",
            self.epoch, self.phase, self.split, self.loss, self.top1
        )
    }
}

impl MetricRecord {
    /// Parses a line written by `Display`.
    pub fn parse(line: &str) -> Option<MetricRecord> {
        let mut rec = MetricRecord {
            epoch: 0,
            phase: String::new(),
            split: "",
            loss: 0.0,
            top1: 0.0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "epoch" => rec.epoch = v.parse().ok()?,
                "phase" => rec.phase = v.to_string(),
                "split" => {
                    rec.split = match v {
                        "train" => "train",
                        "test" => "test",
                        _ => return None,
                    }
                }
                "loss" => rec.loss = v.parse().ok()?,
                "top1" => rec.top1 = v.parse().ok()?,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 5).then_some(rec)
    }
}

pub type MetricSink<'a> = dyn FnMut(&MetricRecord) -> Result<()> + 'a;

/// Trains `model` for `cfg.epochs` epochs with its own optimizer state and
/// learning-rate schedule.
pub fn train_phase(
    model: &mut Model,
    data: &Splits,
    cfg: &TrainConfig,
    teacher: Option<&Model>,
    phase: &str,
    sink: &mut MetricSink<'_>,
) -> Result<Vec<MetricRecord>> {
    let per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let total = (per_epoch * cfg.epochs as u64).max(1);
    let target = match teacher {
        Some(t) => Target::Teacher(t),
        None => Target::Labels,
    };
    let mut opt = OptimizerState::new();
    let mut log = Vec::new();
    let mut emit = |r: MetricRecord, log: &mut Vec<MetricRecord>| -> Result<()> {
        sink(&r)?;
        log.push(r);
        Ok(())
    };
    for epoch in 1..=cfg.epochs {
        let (mut loss, mut correct, mut seen) = (0.0, 0, 0);
        for batch in data.train.train_batches(cfg.batch_size, cfg.seed, epoch as u64) {
            let lr = linear_lr(opt.step, total, cfg.initial_lr);
            let out = train_step(model, &batch, target, &mut opt, lr, cfg.weight_decay)?;
            loss += out.loss * batch.len() as f64;
            correct += out.correct;
            seen += batch.len();
        }
        let seen_f = seen.max(1) as f64;
        emit(
            MetricRecord {
                epoch,
                phase: phase.to_string(),
                split: "train",
                loss: loss / seen_f,
                top1: correct as f64 / seen_f,
            },
            &mut log,
        )?;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (loss, top1) = evaluate(model, &data.test, cfg.batch_size)?;
            emit(
                MetricRecord {
                    epoch,
                    phase: phase.to_string(),
                    split: "test",
                    loss,
                    top1,
                },
                &mut log,
            )?;
        }
    }
    Ok(log)
}

/// Result of a full protocol run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    /// Final step-1 parameters of a two-step run.
    pub step1: Option<Model>,
    pub log: Vec<MetricRecord>,
}

fn load_teacher(cfg: &TrainConfig, student: &ModelConfig) -> Result<Option<Model>> {
    if cfg.loss != LossKind::Distillation {
        return Ok(None);
    }
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::config("train.teacher", "distillation needs a teacher checkpoint"))?;
    let teacher = load_model(path)?;
    let ti = teacher.config().input;
    if ti != student.input || teacher.classes() != student.classifier.map_or(0, |c| c.classes) {
        return Err(Error::config(
            "train.teacher",
            "teacher input shape or class count differs from the student",
        ));
    }
    Ok(Some(teacher))
}

/// Runs the configured protocol from a freshly built model. With an output
/// directory, two-step runs write `step1/model.dybnn` and `step2/model.dybnn`
/// and step 2 starts from the file written by step 1.
pub fn run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Splits,
    out_dir: Option<&Path>,
    sink: &mut MetricSink<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let teacher = load_teacher(cfg, model_cfg)?;
    let mut model = build_model(model_cfg)?;
    match cfg.protocol {
        Protocol::OneStep => {
            let log = train_phase(&mut model, data, cfg, teacher.as_ref(), "one-step", sink)?;
            if let Some(dir) = out_dir {
                save_model(&model, &dir.join("model.dybnn"))?;
            }
            Ok(RunOutcome {
                model,
                step1: None,
                log,
            })
        }
        Protocol::TwoStep => run_two_step(model, cfg, data, teacher.as_ref(), out_dir, sink),
    }
}

/// Step 1 trains with binary activations and real-valued conv weights; step 2
/// inherits every parameter and trains with binary weights. Each step gets
/// the full epoch budget and a fresh optimizer.
pub fn run_two_step(
    mut model: Model,
    cfg: &TrainConfig,
    data: &Splits,
    teacher: Option<&Model>,
    out_dir: Option<&Path>,
    sink: &mut MetricSink<'_>,
) -> Result<RunOutcome> {
    model.set_weight_mode(WeightMode::Real);
    let mut log = train_phase(&mut model, data, cfg, teacher, "step1", sink)?;
    let step1 = model.clone();
    let mut model = match out_dir {
        Some(dir) => {
            let (d1, d2) = (dir.join("step1"), dir.join("step2"));
            for d in [&d1, &d2] {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            save_model(&model, &d1.join("model.dybnn"))?;
            load_model(&d1.join("model.dybnn"))?
        }
        None => decode_model(&encode_model(&model))?,
    };
    model.set_weight_mode(WeightMode::Binary);
    log.extend(train_phase(&mut model, data, cfg, teacher, "step2", sink)?);
    if let Some(dir) = out_dir {
        save_model(&model, &dir.join("step2").join("model.dybnn"))?;
    }
    Ok(RunOutcome {
        model,
        step1: Some(step1),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(n: usize, c: usize, v: &[f64]) -> ChannelVector {
        ChannelVector::from_rows(n, c, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_lr_endpoints() {
        assert_eq!(linear_lr(0, 10, 5e-4), 5e-4);
        assert_eq!(linear_lr(10, 10, 5e-4), 0.0);
        assert_eq!(linear_lr(5, 10, 5e-4), 2.5e-4);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let a = cv(2, 3, &[1.0, -2.0, 0.5, 3.0, 3.0, 3.0]);
        assert_eq!(distillation_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn kl_against_uniform_student() {
        // teacher nearly one-hot, student uniform: KL = log k - H(teacher)
        let t = [30.0, 0.0, 0.0, 0.0];
        let s = cv(1, 4, &[0.0; 4]);
        let p = softmax(&t);
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let got = distillation_loss(&s, &cv(1, 4, &t)).unwrap();
        assert!((got - (4f64.ln() - entropy)).abs() < 1e-12);
    }

    #[test]
    fn kl_shift_invariant() {
        let s = cv(1, 3, &[0.3, -1.0, 2.0]);
        let t = cv(1, 3, &[1.0, 0.0, -0.5]);
        let s2 = cv(1, 3, &[10.3, 9.0, 12.0]);
        let a = distillation_loss(&s, &t).unwrap();
        assert!((a - distillation_loss(&s2, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn distillation_shape_mismatch() {
        let s = cv(1, 3, &[0.0; 3]);
        let t = cv(1, 2, &[0.0; 2]);
        assert!(matches!(distillation_loss(&s, &t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn config_requires_teacher_for_distillation() {
        let cfg = TrainConfig {
            loss: LossKind::Distillation,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { path, .. }) if path == "train.teacher"));
    }

    #[test]
    fn metric_lines_round_trip() {
        let r = MetricRecord {
            epoch: 2,
            phase: "step1".into(),
            split: "test",
            loss: 0.25,
            top1: 0.5,
        };
        let line = r.to_string();
        assert_eq!(line, "epoch=2 phase=step1 split=test loss=0.250000 top1=0.5000");
        assert_eq!(MetricRecord::parse(&line), Some(r));
    }
}

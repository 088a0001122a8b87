//! Training phases: teacher, student main branch, shortcut branches,
//! post-selection fine-tuning, and evaluation.

mod optimizer;

use std::collections::HashMap;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optimizer::{Optimizer, OptimizerKind, Slot, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM};

use crate::data::Dataset;
use crate::distill::{block_residual, distill_block_loss, total_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::metrics::{EpochMetrics, MetricLine, MetricsSink};
use crate::network::{Binder, BranchState, ParamMeta, ParamRole, Params, Student, StudentMode, Teacher};
use crate::tensor::{BnMode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Teacher,
    Main,
    Shortcut,
    Finetune,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Main => "main",
            Phase::Shortcut => "shortcut",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    /// `(epoch, multiplier)` points; the lr at epoch `e` is `lr` times every
    /// multiplier whose epoch is ≤ `e`.
    pub schedule: Vec<(usize, f32)>,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Applied to shadow and float weights only.
    pub weight_decay: f32,
    pub seed: u64,
    /// Random crop and horizontal flip on training batches.
    pub augment: bool,
    /// Let BN parameters (and running statistics) of the main network train
    /// during the shortcut and fine-tune phases.
    pub train_bn_with_shortcuts: bool,
    /// Emit a step metric line every this many steps.
    pub log_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 0.01,
            schedule: Vec::new(),
            epochs: 1,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            seed: 0,
            augment: true,
            train_bn_with_shortcuts: false,
            log_every: 1,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and ≥ 0, got {}",
                self.lr
            )));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        for w in self.schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::config(format!(
                    "schedule epochs must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(e, _)) = self.schedule.iter().find(|(e, _)| *e >= self.epochs) {
            return Err(Error::config(format!(
                "schedule epoch {e} is not below epochs = {}",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }
}

/// Optimizer state and progress carried between phases and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: Optimizer,
    pub epochs_done: usize,
    pub step: u64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            optimizer: Optimizer::new(cfg.optimizer, cfg.weight_decay),
            epochs_done: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Fresh optimizer moments for a new phase; progress counters kept.
    pub fn next_phase(&mut self, cfg: &TrainConfig) {
        self.optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    }
}

/// Which parameters a phase may change.
pub fn phase_trainable(phase: Phase, train_bn_with_shortcuts: bool) -> impl Fn(&ParamMeta) -> bool {
    move |m: &ParamMeta| {
        if m.frozen_by_state {
            return false;
        }
        match phase {
            Phase::Teacher => true,
            Phase::Main => m.role.is_main_network(),
            Phase::Shortcut | Phase::Finetune => {
                matches!(m.role, ParamRole::Shortcut { .. })
                    || (train_bn_with_shortcuts && m.kind.is_batch_norm() && m.role != ParamRole::Stem)
            }
        }
    }
}

/// SHA-256 over every parameter the predicate rejects, plus buffers when
/// `with_buffers` is set.
pub fn frozen_digest<P: Params + ?Sized>(
    model: &P,
    trainable: &dyn Fn(&ParamMeta) -> bool,
    with_buffers: bool,
) -> [u8; 32] {
    let mut h = Sha256::new();
    model.visit(&mut |meta, t| {
        if !trainable(meta) {
            h.update(meta.name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    });
    if with_buffers {
        model.visit_buffers(&mut |name, t| {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
    }
    h.finalize().into()
}

/// Number of rows whose arg-max (first maximum wins) equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let [n, classes, _, _] = logits.shape();
    (0..n)
        .filter(|&i| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == labels[i]
        })
        .count()
}

fn apply_updates<P: Params + ?Sized>(
    model: &mut P,
    tape: &Tape,
    bound: &[(String, Var)],
    opt: &mut Optimizer,
    lr: f32,
) {
    let grads: HashMap<&str, Tensor> = bound
        .iter()
        .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.as_str(), g)))
        .collect();
    model.visit_mut(&mut |meta, t| {
        if let Some(g) = grads.get(meta.name.as_str()) {
            opt.step(meta, t, g, lr);
        }
    });
}

struct StepOut {
    loss: f64,
    ce: f64,
    distill: Vec<f64>,
    correct: usize,
}

/// One model being trained in one phase.
trait Trainee {
    fn step(&mut self, x: &Tensor, y: &[usize], lr: f32, opt: &mut Optimizer, step: u64) -> Result<StepOut>;
    fn digest(&self) -> [u8; 32];
    fn accuracy(&mut self, data: &Dataset, batch: usize) -> Result<f64>;
}

fn check_loss(value: f32, step: u64, phase: Phase, last_finite: Option<f64>) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!(
                "phase {} produced loss {value}; last finite loss {}",
                phase.as_str(),
                last_finite.map_or("none".to_string(), |v| format!("{v}"))
            ),
        })
    }
}

struct TeacherRun<'a> {
    teacher: &'a mut Teacher,
    last_finite: Option<f64>,
}

impl Trainee for TeacherRun<'_> {
    fn step(&mut self, x: &Tensor, y: &[usize], lr: f32, opt: &mut Optimizer, step: u64) -> Result<StepOut> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(phase_trainable(Phase::Teacher, false));
        let out = self.teacher.forward(&mut tape, &mut binder, x, BnMode::Train)?;
        let loss = tape.cross_entropy(out.logits, y)?;
        let value = tape.value(loss).data()[0];
        check_loss(value, step, Phase::Teacher, self.last_finite)?;
        self.last_finite = Some(value as f64);
        let correct = count_correct(tape.value(out.logits), y);
        tape.backward(loss)?;
        apply_updates(self.teacher, &tape, binder.bound(), opt, lr);
        Ok(StepOut {
            loss: value as f64,
            ce: value as f64,
            distill: Vec::new(),
            correct,
        })
    }

    fn digest(&self) -> [u8; 32] {
        frozen_digest(self.teacher, &phase_trainable(Phase::Teacher, false), false)
    }

    fn accuracy(&mut self, data: &Dataset, batch: usize) -> Result<f64> {
        Ok(evaluate(self.teacher, None, data, batch, &[])?.top1)
    }
}

struct StudentRun<'a> {
    student: &'a mut Student,
    teacher: Option<&'a mut Teacher>,
    phase: Phase,
    pairs: Vec<(usize, usize)>,
    alpha: f32,
    train_bn: bool,
    last_finite: Option<f64>,
}

impl StudentRun<'_> {
    fn mode(&self) -> StudentMode {
        StudentMode {
            bn: if self.phase == Phase::Main || self.train_bn {
                BnMode::Train
            } else {
                BnMode::Eval
            },
            shortcuts: self.phase != Phase::Main,
        }
    }
}

impl Trainee for StudentRun<'_> {
    fn step(&mut self, x: &Tensor, y: &[usize], lr: f32, opt: &mut Optimizer, step: u64) -> Result<StepOut> {
        let teacher_features = match self.teacher.as_deref_mut() {
            Some(t) => Some(t.features(x)?.0),
            None => None,
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new(phase_trainable(self.phase, self.train_bn));
        let mode = self.mode();
        let out = self.student.forward(&mut tape, &mut binder, x, mode)?;
        let mut block_losses = Vec::new();
        if let Some(tf) = &teacher_features {
            for &(ti, si) in &self.pairs {
                let t = tape.constant(tf[ti].clone());
                block_losses.push(distill_block_loss(&mut tape, t, out.features[si])?);
            }
        }
        let ce = tape.cross_entropy(out.logits, y)?;
        let loss = total_loss(&mut tape, out.logits, y, &block_losses, self.alpha)?;
        let value = tape.value(loss).data()[0];
        check_loss(value, step, self.phase, self.last_finite)?;
        self.last_finite = Some(value as f64);
        let correct = count_correct(tape.value(out.logits), y);
        let ce_value = tape.value(ce).data()[0] as f64;
        let distill = block_losses.iter().map(|&b| tape.value(b).data()[0] as f64).collect();
        tape.backward(loss)?;
        apply_updates(self.student, &tape, binder.bound(), opt, lr);
        Ok(StepOut {
            loss: value as f64,
            ce: ce_value,
            distill,
            correct,
        })
    }

    fn digest(&self) -> [u8; 32] {
        let bn_frozen = self.mode().bn == BnMode::Eval;
        frozen_digest(self.student, &phase_trainable(self.phase, self.train_bn), bn_frozen)
    }

    fn accuracy(&mut self, data: &Dataset, batch: usize) -> Result<f64> {
        let mode = self.mode();
        if mode.shortcuts {
            Ok(evaluate(self.student, None, data, batch, &[])?.top1)
        } else {
            Ok(evaluate(&mut WithoutShortcuts(self.student), None, data, batch, &[])?.top1)
        }
    }
}

fn run_epochs(
    trainee: &mut dyn Trainee,
    phase: Phase,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    state: &mut TrainState,
    sink: &mut dyn MetricsSink,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::data("training set is empty", None));
    }
    let before = trainee.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.epochs_done as u64).rotate_left(32));
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss, mut ce, mut correct, mut steps) = (0.0, 0.0, 0usize, 0usize);
        let mut distill: Vec<f64> = Vec::new();
        for idx in data.epoch_batches(cfg.batch_size, Some(&mut rng)) {
            let (x, y) = if cfg.augment {
                data.batch(&idx, Some(&mut rng))
            } else {
                data.batch::<ChaCha8Rng>(&idx, None)
            };
            let s = trainee.step(&x, &y, lr, &mut state.optimizer, state.step)?;
            state.step += 1;
            steps += 1;
            loss += s.loss;
            ce += s.ce;
            correct += s.correct;
            if distill.is_empty() {
                distill = vec![0.0; s.distill.len()];
            }
            for (acc, d) in distill.iter_mut().zip(&s.distill) {
                *acc += d;
            }
            if state.step.is_multiple_of(cfg.log_every as u64) {
                let mut line = MetricLine::new()
                    .with("step", state.step)
                    .with("phase", phase.as_str())
                    .with("epoch", state.epochs_done)
                    .with("lr", lr)
                    .with("loss", format!("{:.6}", s.loss))
                    .with("ce_loss", format!("{:.6}", s.ce));
                for (i, d) in s.distill.iter().enumerate() {
                    line = line.with(format!("distill_{i}"), format!("{d:.6}"));
                }
                sink.record(line);
            }
        }
        let after = trainee.digest();
        if after != before {
            return Err(Error::Invariant(format!(
                "a parameter frozen in phase {} changed during epoch {epoch}",
                phase.as_str()
            )));
        }
        let val_acc = match val {
            Some(v) => Some(trainee.accuracy(v, cfg.eval_batch_size)?),
            None => None,
        };
        let steps_f = steps.max(1) as f64;
        let m = EpochMetrics {
            phase: phase.as_str().to_string(),
            epoch: state.epochs_done,
            lr,
            loss: loss / steps_f,
            ce_loss: ce / steps_f,
            distill: distill.iter().map(|d| d / steps_f).collect(),
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
        };
        let mut line = MetricLine::new()
            .with("phase", phase.as_str())
            .with("epoch", m.epoch)
            .with("lr", lr)
            .with("train_loss", format!("{:.6}", m.loss))
            .with("train_acc", format!("{:.4}", m.train_acc));
        for (i, d) in m.distill.iter().enumerate() {
            line = line.with(format!("mean_distill_{i}"), format!("{d:.6}"));
        }
        if let Some(a) = val_acc {
            line = line.with("val_acc", format!("{a:.4}"));
        }
        info!("{line}");
        sink.record(line);
        state.epochs_done += 1;
        state.history.push(m.clone());
        out.push(m);
    }
    Ok(out)
}

/// Trains every teacher parameter with cross-entropy.
pub fn train_teacher(
    teacher: &mut Teacher,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    state: &mut TrainState,
    sink: &mut dyn MetricsSink,
) -> Result<Vec<EpochMetrics>> {
    let mut run = TeacherRun {
        teacher,
        last_finite: None,
    };
    run_epochs(&mut run, Phase::Teacher, cfg, data, val, state, sink)
}

/// Trains one student phase with `CE + α·Σ distillation`.
///
/// - `Main`: stem, main branches, hidden FCs and head; shortcuts ignored.
/// - `Shortcut`: shortcut parameters only (plus BN if configured).
/// - `Finetune`: like `Shortcut`, but requires every branch to have been
///   selected.
///
/// The teacher is only needed when `α > 0`.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    student: &mut Student,
    teacher: Option<&mut Teacher>,
    phase: Phase,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    state: &mut TrainState,
    sink: &mut dyn MetricsSink,
) -> Result<Vec<EpochMetrics>> {
    distill.validate()?;
    match phase {
        Phase::Teacher => return Err(Error::usage("train_student cannot run the teacher phase")),
        Phase::Main => {}
        Phase::Shortcut | Phase::Finetune => {
            if student.branches().next().is_none() {
                return Err(Error::usage(format!(
                    "phase {} needs a network with shortcut branches (K ≥ 1)",
                    phase.as_str()
                )));
            }
            if phase == Phase::Finetune {
                if let Some((i, k, _)) = student.branches().find(|(_, _, b)| b.state == BranchState::Dense) {
                    return Err(Error::usage(format!(
                        "fine-tuning needs selected shortcuts; block {i} shortcut {k} is dense"
                    )));
                }
            }
        }
    }
    let teacher = if distill.alpha > 0.0 {
        match teacher {
            Some(t) => {
                t.check_compatible(&student.spec)?;
                Some(t)
            }
            None => return Err(Error::config("distillation (alpha > 0) needs a teacher")),
        }
    } else {
        None
    };
    let pairs = distill.resolved_pairs(student.blocks.len())?;
    let mut run = StudentRun {
        student,
        teacher,
        phase,
        pairs,
        alpha: distill.alpha,
        train_bn: cfg.train_bn_with_shortcuts,
        last_finite: None,
    };
    run_epochs(&mut run, phase, cfg, data, val, state, sink)
}

/// Fine-tunes surviving shortcut parameters after selection/sparsification.
#[allow(clippy::too_many_arguments)]
pub fn finetune_shortcuts(
    student: &mut Student,
    teacher: Option<&mut Teacher>,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    state: &mut TrainState,
    sink: &mut dyn MetricsSink,
) -> Result<Vec<EpochMetrics>> {
    train_student(student, teacher, Phase::Finetune, cfg, distill, data, val, state, sink)
}

/// Anything that yields eval-mode block features and logits.
pub trait FeatureModel {
    fn eval_features(&mut self, input: &Tensor) -> Result<(Vec<Tensor>, Tensor)>;
}

impl FeatureModel for Teacher {
    fn eval_features(&mut self, input: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.features(input)
    }
}

fn student_features(s: &mut Student, input: &Tensor, mode: StudentMode) -> Result<(Vec<Tensor>, Tensor)> {
    let mut tape = Tape::new();
    let out = s.forward(&mut tape, &mut Binder::frozen(), input, mode)?;
    Ok((
        out.features.iter().map(|&v| tape.value(v).clone()).collect(),
        tape.value(out.logits).clone(),
    ))
}

impl FeatureModel for Student {
    fn eval_features(&mut self, input: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        student_features(self, input, StudentMode::EVAL)
    }
}

/// A student evaluated as if it had no shortcut branches.
pub struct WithoutShortcuts<'a>(pub &'a mut Student);

impl FeatureModel for WithoutShortcuts<'_> {
    fn eval_features(&mut self, input: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        student_features(
            self.0,
            input,
            StudentMode {
                bn: BnMode::Eval,
                shortcuts: false,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub samples: usize,
    /// Mean distillation residual per `(reference block, model block)` pair.
    pub residuals: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// Top-1 accuracy and, with a reference model, per-block residuals
/// (sample-weighted mean of the block distillation loss).
pub fn evaluate(
    model: &mut dyn FeatureModel,
    mut reference: Option<&mut dyn FeatureModel>,
    data: &Dataset,
    batch_size: usize,
    pairs: &[(usize, usize)],
) -> Result<EvalReport> {
    let mut correct = 0;
    let mut sums = vec![0.0; pairs.len()];
    for idx in data.epoch_batches::<ChaCha8Rng>(batch_size, None) {
        let (x, y) = data.batch::<ChaCha8Rng>(&idx, None);
        let (features, logits) = model.eval_features(&x)?;
        correct += count_correct(&logits, &y);
        if let Some(r) = reference.as_deref_mut() {
            let (rf, _) = r.eval_features(&x)?;
            for (k, &(ri, mi)) in pairs.iter().enumerate() {
                let (a, b) = (rf.get(ri), features.get(mi));
                let (Some(a), Some(b)) = (a, b) else {
                    return Err(Error::config(format!("residual pair ({ri}, {mi}) out of range")));
                };
                sums[k] += block_residual(a, b)? * idx.len() as f64;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        top1: correct as f64 / n,
        samples: data.len(),
        residuals: if reference.is_some() {
            sums.iter().map(|s| s / n).collect()
        } else {
            Vec::new()
        },
        pairs: pairs.to_vec(),
    })
}

/// Tab-separated per-block residual report.
pub fn residual_table(report: &EvalReport) -> String {
    let mut out = String::from("teacher_block\tstudent_block\tmean_residual\n");
    for (&(t, s), r) in report.pairs.iter().zip(&report.residuals) {
        out.push_str(&format!("{t}\t{s}\t{r:.9}\n"));
    }
    out
}

//! End-to-end runs: the full compression pipeline and the desk-scale
//! comparison of training variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::compress::{select_channels, sparsify_interaction, SelectionPolicy, SelectionReport, Strategy};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::distill::DistillConfig;
use crate::error::Result;
use crate::metrics::{MetricLine, MetricsSink};
use crate::network::{NetworkSpec, Student, Teacher};
use crate::train::{evaluate, train_student, train_teacher, EvalReport, Phase, TrainConfig, TrainState};

pub struct PipelineOutcome {
    pub teacher: Teacher,
    pub student: Student,
    pub selection: SelectionReport,
    pub zeroed: usize,
    pub eval: EvalReport,
    pub checkpoint: Checkpoint,
    pub checksum: [u8; 32],
}

/// teacher → main → shortcut → select → sparsify → finetune → eval, all
/// from one seed. Every training phase uses `cfg.train` with its seed
/// replaced by `seed`.
pub fn run_full(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<PipelineOutcome> {
    let spec = cfg.network_spec()?;
    spec.validate_runtime()?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = Teacher::new(&spec, &mut rng)?;
    let mut student = Student::new(&spec, &mut rng)?;

    let mut tstate = TrainState::new(&tcfg);
    train_teacher(&mut teacher, &tcfg, train, None, &mut tstate, sink)?;

    let mut state = TrainState::new(&tcfg);
    train_student(
        &mut student,
        Some(&mut teacher),
        Phase::Main,
        &tcfg,
        &cfg.distill,
        train,
        None,
        &mut state,
        sink,
    )?;
    state.next_phase(&tcfg);
    train_student(
        &mut student,
        Some(&mut teacher),
        Phase::Shortcut,
        &tcfg,
        &cfg.distill,
        train,
        None,
        &mut state,
        sink,
    )?;
    let selection = select_channels(&mut student, &cfg.compress.policy())?;
    let zeroed = sparsify_interaction(&mut student, cfg.compress.keep_threshold)?;
    state.next_phase(&tcfg);
    train_student(
        &mut student,
        Some(&mut teacher),
        Phase::Finetune,
        &tcfg,
        &cfg.distill,
        train,
        None,
        &mut state,
        sink,
    )?;

    let pairs = cfg.distill.resolved_pairs(spec.blocks.len())?;
    let eval = evaluate(&mut student, Some(&mut teacher), test, tcfg.eval_batch_size, &pairs)?;
    let mut line = MetricLine::new()
        .with("phase", "eval")
        .with("top1", format!("{:.6}", eval.top1))
        .with("kept", selection.total_kept)
        .with("zeroed", zeroed);
    for (i, r) in eval.residuals.iter().enumerate() {
        line = line.with(format!("residual_{i}"), format!("{r:.9}"));
    }
    sink.record(line);
    let checkpoint = Checkpoint::from_student(&student, Some(&state), Some(&selection));
    let checksum = checkpoint.checksum();
    Ok(PipelineOutcome {
        teacher,
        student,
        selection,
        zeroed,
        eval,
        checkpoint,
        checksum,
    })
}

/// Settings of the variant comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendProfile {
    pub spec: NetworkSpec,
    pub train_images: usize,
    pub teacher: TrainConfig,
    /// Main-branch training of every student variant.
    pub student: TrainConfig,
    /// Shortcut training and post-selection fine-tuning.
    pub shortcut: TrainConfig,
    pub alpha: f32,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
}

impl TrendProfile {
    /// Quarter-width VGG-small, 5k training images, 30 epochs, 3 seeds.
    pub fn desk() -> Self {
        let base = TrainConfig {
            batch_size: 128,
            lr: 0.01,
            epochs: 30,
            schedule: vec![(20, 0.1)],
            ..TrainConfig::default()
        };
        TrendProfile {
            spec: NetworkSpec::vgg_small(4).expect("4 divides 128"),
            train_images: 5000,
            teacher: base.clone(),
            student: base.clone(),
            shortcut: TrainConfig {
                epochs: 10,
                schedule: vec![],
                lr: 0.001,
                ..base
            },
            alpha: 0.1,
            epsilon: 0.1,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// K = 0, α = 0.
    pub baseline: f64,
    /// K = 0, α > 0.
    pub distill: f64,
    /// K = 1 step-trained on top of the distilled main branch.
    pub shortcut: f64,
    pub global: f64,
    pub random: f64,
    /// Mean per-block distillation loss in the first and last epoch of the
    /// distilled main-branch run.
    pub distill_first: Vec<f64>,
    pub distill_last: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendReport {
    pub seeds: Vec<SeedOutcome>,
}

impl TrendReport {
    /// Every seed and every block ends below where it started.
    pub fn distill_loss_decreases(&self) -> bool {
        self.seeds
            .iter()
            .all(|s| s.distill_first.iter().zip(&s.distill_last).all(|(f, l)| l < f))
    }

    pub fn distill_beats_baseline(&self) -> usize {
        self.seeds.iter().filter(|s| s.baseline < s.distill).count()
    }

    pub fn shortcut_beats_baseline(&self) -> usize {
        self.seeds.iter().filter(|s| s.baseline < s.shortcut).count()
    }

    pub fn global_not_below_random(&self) -> usize {
        self.seeds.iter().filter(|s| s.global >= s.random).count()
    }
}

fn trained_teacher(p: &TrendProfile, train: &Dataset, seed: u64, sink: &mut dyn MetricsSink) -> Result<Teacher> {
    let cfg = TrainConfig {
        seed,
        ..p.teacher.clone()
    };
    let mut t = Teacher::new(
        &p.spec.clone().with_shortcuts(0),
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x7eac),
    )?;
    train_teacher(&mut t, &cfg, train, None, &mut TrainState::new(&cfg), sink)?;
    Ok(t)
}

#[allow(clippy::too_many_arguments)]
fn selected_accuracy(
    base: &Student,
    teacher: &mut Teacher,
    p: &TrendProfile,
    strategy: Strategy,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn MetricsSink,
) -> Result<f64> {
    let mut s = base.clone();
    select_channels(
        &mut s,
        &SelectionPolicy {
            strategy,
            epsilon: p.epsilon,
            seed,
        },
    )?;
    sparsify_interaction(&mut s, None)?;
    let cfg = TrainConfig {
        seed,
        ..p.shortcut.clone()
    };
    let distill = DistillConfig {
        alpha: p.alpha,
        pairs: vec![],
    };
    train_student(
        &mut s,
        Some(teacher),
        Phase::Finetune,
        &cfg,
        &distill,
        train,
        None,
        &mut TrainState::new(&cfg),
        sink,
    )?;
    Ok(evaluate(&mut s, None, test, cfg.eval_batch_size, &[])?.top1)
}

/// Trains and compares the variants for every seed in the profile.
pub fn run_trend(p: &TrendProfile, train: &Dataset, test: &Dataset, sink: &mut dyn MetricsSink) -> Result<TrendReport> {
    let train = train.take(p.train_images);
    let k0 = p.spec.clone().with_shortcuts(0);
    let k1 = p.spec.clone().with_shortcuts(1);
    let mut seeds = Vec::new();
    for &seed in &p.seeds {
        let mut teacher = trained_teacher(p, &train, seed, sink)?;
        let cfg = TrainConfig {
            seed,
            ..p.student.clone()
        };
        let eval_batch = cfg.eval_batch_size;

        let mut baseline = Student::new(&k0, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let plain = DistillConfig {
            alpha: 0.0,
            pairs: vec![],
        };
        train_student(
            &mut baseline,
            None,
            Phase::Main,
            &cfg,
            &plain,
            &train,
            None,
            &mut TrainState::new(&cfg),
            sink,
        )?;
        let baseline_acc = evaluate(&mut baseline, None, test, eval_batch, &[])?.top1;

        // same initialisation as the baseline, now with distillation
        let mut distilled = Student::new(&k0, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let distill = DistillConfig {
            alpha: p.alpha,
            pairs: vec![],
        };
        let mut state = TrainState::new(&cfg);
        let hist = train_student(
            &mut distilled,
            Some(&mut teacher),
            Phase::Main,
            &cfg,
            &distill,
            &train,
            None,
            &mut state,
            sink,
        )?;
        let distill_acc = evaluate(&mut distilled, None, test, eval_batch, &[])?.top1;

        let mut with_sc = Student::new(&k1, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5c))?;
        with_sc.copy_main_from(&distilled);
        let scfg = TrainConfig {
            seed,
            ..p.shortcut.clone()
        };
        train_student(
            &mut with_sc,
            Some(&mut teacher),
            Phase::Shortcut,
            &scfg,
            &distill,
            &train,
            None,
            &mut TrainState::new(&scfg),
            sink,
        )?;
        let shortcut_acc = evaluate(&mut with_sc, None, test, eval_batch, &[])?.top1;

        let global = selected_accuracy(&with_sc, &mut teacher, p, Strategy::Global, seed, &train, test, sink)?;
        let random = selected_accuracy(&with_sc, &mut teacher, p, Strategy::Random, seed, &train, test, sink)?;

        let outcome = SeedOutcome {
            seed,
            baseline: baseline_acc,
            distill: distill_acc,
            shortcut: shortcut_acc,
            global,
            random,
            distill_first: hist.first().map(|m| m.distill.clone()).unwrap_or_default(),
            distill_last: hist.last().map(|m| m.distill.clone()).unwrap_or_default(),
        };
        sink.record(
            MetricLine::new()
                .with("trend_seed", seed)
                .with("baseline", format!("{:.4}", outcome.baseline))
                .with("distill", format!("{:.4}", outcome.distill))
                .with("shortcut", format!("{:.4}", outcome.shortcut))
                .with("global", format!("{:.4}", outcome.global))
                .with("random", format!("{:.4}", outcome.random)),
        );
        seeds.push(outcome);
    }
    Ok(TrendReport { seeds })
}

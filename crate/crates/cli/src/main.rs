use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use binnet::checkpoint::{sha256_hex, write_atomic, Checkpoint, ModelKind};
use binnet::compress::{overhead_fraction, rounding_slack, select_channels, sparsify_interaction};
use binnet::config::RunConfig;
use binnet::cost::{block_table, cost_of, cost_table, standard_rows, CompressionState};
use binnet::data::Dataset;
use binnet::metrics::WriteSink;
use binnet::network::{NetworkSpec, Student, Teacher};
use binnet::train::{
    evaluate, residual_table, train_student, train_teacher, EvalReport, FeatureModel, Phase, TrainState,
};
use binnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "binnet",
    version,
    about = "Train, compress and cost binary CNNs with distillation and SI shortcuts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (TOML with [data] [network] [train] [distill] [compress]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input checkpoint (never modified).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; files in it are written once and never overwritten.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `[train] seed` and the initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
struct WithTeacher {
    #[command(flatten)]
    common: Common,
    /// Teacher checkpoint used for distillation or residuals.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision teacher.
    TrainTeacher(Common),
    /// Train the student's main branch (shortcuts ignored).
    TrainMain(WithTeacher),
    /// Train shortcut branches with the main branch frozen.
    TrainShortcut(WithTeacher),
    /// Keep the most important squeeze channels under the ε budget.
    Select(Common),
    /// Zero small interaction entries and freeze T.
    Sparsify(Common),
    /// Fine-tune surviving shortcut parameters.
    Finetune(WithTeacher),
    /// Top-1 accuracy on the test split (plus residuals with --teacher).
    Eval(WithTeacher),
    /// FLOPs / size table for the configured network or a checkpoint.
    Cost(Common),
    /// Per-block distillation residuals against a teacher.
    Residuals(WithTeacher),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher(_) => "train-teacher",
            Command::TrainMain(_) => "train-main",
            Command::TrainShortcut(_) => "train-shortcut",
            Command::Select(_) => "select",
            Command::Sparsify(_) => "sparsify",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Cost(_) => "cost",
            Command::Residuals(_) => "residuals",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingData(_) | Error::Data { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

/// Write-once output directory plus run manifest.
struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if p.exists() {
            return Err(Error::usage(format!(
                "refusing to overwrite existing output {}",
                p.display()
            )));
        }
        Ok(p)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name)?, bytes)
    }

    /// Fails before any work is done if one of `names` already exists.
    fn reserve(&self, names: &[&str]) -> Result<()> {
        names.iter().try_for_each(|n| self.path(n).map(drop))
    }

    fn metrics(&self) -> Result<WriteSink<BufWriter<fs::File>>> {
        let p = self.path("metrics.log")?;
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok(WriteSink(BufWriter::new(f)))
    }
}

/// Everything a command needs, resolved from the arguments.
struct Context {
    command: &'static str,
    config: RunConfig,
    config_text: String,
    config_given: bool,
    seed: u64,
    out: Option<Outputs>,
    inputs: Vec<(String, PathBuf)>,
}

impl Context {
    fn new(command: &'static str, c: &Common) -> Result<Self> {
        let (config, config_text, config_given) = match &c.config {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingData(p.clone()));
                }
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                (RunConfig::parse(&text)?, text, true)
            }
            None => (RunConfig::default(), String::new(), false),
        };
        let mut config = config;
        let seed = c.seed.unwrap_or(config.train.seed);
        config.train.seed = seed;
        let out = c.out.as_deref().map(Outputs::create).transpose()?;
        let mut inputs = Vec::new();
        if let Some(p) = &c.checkpoint {
            inputs.push(("checkpoint".to_string(), p.clone()));
        }
        Ok(Context {
            command,
            config,
            config_text,
            config_given,
            seed,
            out,
            inputs,
        })
    }

    fn out(&self) -> Result<&Outputs> {
        self.out
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} needs --out DIR", self.command)))
    }

    fn require_checkpoint(&self, c: &Common) -> Result<Checkpoint> {
        let p = c
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} needs --checkpoint PATH", self.command)))?;
        let ck = Checkpoint::load(p)?;
        if self.config_given && ck.meta.kind == ModelKind::Student {
            ck.check_spec(&self.config.network_spec()?)?;
        }
        Ok(ck)
    }

    fn teacher(&mut self, path: Option<&PathBuf>, needed: bool) -> Result<Option<Teacher>> {
        match path {
            Some(p) => {
                self.inputs.push(("teacher".to_string(), p.clone()));
                Ok(Some(Checkpoint::load(p)?.to_teacher()?))
            }
            None if needed => Err(Error::config(format!(
                "{} with distillation (alpha > 0) needs --teacher PATH",
                self.command
            ))),
            None => Ok(None),
        }
    }

    fn datasets(&self, spec: &NetworkSpec) -> Result<(Dataset, Dataset)> {
        self.config.datasets_for(spec)
    }

    /// Records what is needed to replay this run.
    fn write_manifest(&self) -> Result<()> {
        let Some(out) = &self.out else { return Ok(()) };
        let mut m = toml::Table::new();
        m.insert("command".into(), self.command.into());
        m.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
        m.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        m.insert("config_sha256".into(), sha256_hex(self.config_text.as_bytes()).into());
        m.insert("effective_config".into(), self.config.to_toml().into());
        let mut inputs = toml::Table::new();
        for (role, p) in &self.inputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let mut entry = toml::Table::new();
            entry.insert("path".into(), p.display().to_string().into());
            entry.insert("sha256".into(), sha256_hex(&bytes).into());
            inputs.insert(role.clone(), entry.into());
        }
        m.insert("inputs".into(), inputs.into());
        out.write(
            "manifest.toml",
            toml::to_string(&m).expect("manifest serialises").as_bytes(),
        )
    }
}

fn train_student_phase(args: &WithTeacher, phase: Phase, name: &'static str) -> Result<String> {
    let mut ctx = Context::new(name, &args.common)?;
    ctx.out()?.reserve(&["student.ckpt", "metrics.log", "manifest.toml"])?;
    let (mut student, mut state, selection) = match (&args.common.checkpoint, phase) {
        (Some(_), _) => {
            let ck = ctx.require_checkpoint(&args.common)?;
            let st = ck.train_state(ctx.config.train.optimizer, ctx.config.train.weight_decay);
            (ck.to_student()?, st, ck.meta.selection.clone())
        }
        (None, Phase::Main) => {
            let spec = ctx.config.network_spec()?;
            let s = Student::new(&spec, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?;
            (s, TrainState::new(&ctx.config.train), None)
        }
        (None, _) => return Err(Error::config(format!("{name} needs --checkpoint PATH"))),
    };
    state.next_phase(&ctx.config.train);
    let mut teacher = ctx.teacher(args.teacher.as_ref(), ctx.config.distill.alpha > 0.0)?;
    let (train, test) = ctx.datasets(&student.spec)?;
    let out = ctx.out()?;
    let mut sink = out.metrics()?;
    let hist = train_student(
        &mut student,
        teacher.as_mut(),
        phase,
        &ctx.config.train,
        &ctx.config.distill,
        &train,
        Some(&test),
        &mut state,
        &mut sink,
    )?;
    Checkpoint::from_student(&student, Some(&state), selection.as_ref()).save(&out.path("student.ckpt")?)?;
    ctx.write_manifest()?;
    Ok(match hist.last() {
        Some(m) => format!(
            "phase={} epochs={} train_loss={:.6} val_acc={:.4}",
            phase.as_str(),
            hist.len(),
            m.loss,
            m.val_acc.unwrap_or(f64::NAN)
        ),
        None => format!("phase={} epochs=0", phase.as_str()),
    })
}

enum Model {
    Teacher(Teacher),
    Student(Student),
}

impl Model {
    fn load(ck: &Checkpoint) -> Result<Self> {
        Ok(match ck.meta.kind {
            ModelKind::Teacher => Model::Teacher(ck.to_teacher()?),
            ModelKind::Student => Model::Student(ck.to_student()?),
        })
    }

    fn as_feature_model(&mut self) -> &mut dyn FeatureModel {
        match self {
            Model::Teacher(t) => t,
            Model::Student(s) => s,
        }
    }
}

fn evaluate_checkpoint(args: &WithTeacher, name: &'static str, teacher_needed: bool) -> Result<(Context, EvalReport)> {
    let mut ctx = Context::new(name, &args.common)?;
    let ck = ctx.require_checkpoint(&args.common)?;
    let mut model = Model::load(&ck)?;
    let mut teacher = ctx.teacher(args.teacher.as_ref(), teacher_needed)?;
    let (_, test) = ctx.datasets(&ck.spec)?;
    let pairs = match &teacher {
        Some(t) => {
            t.check_compatible(&ck.spec)?;
            ctx.config.distill.resolved_pairs(ck.spec.blocks.len())?
        }
        None => Vec::new(),
    };
    let batch = ctx.config.train.eval_batch_size;
    let report = evaluate(
        model.as_feature_model(),
        teacher.as_mut().map(|t| t as &mut dyn FeatureModel),
        &test,
        batch,
        &pairs,
    )?;
    Ok((ctx, report))
}

fn run(cmd: &Command) -> Result<String> {
    match cmd {
        Command::TrainTeacher(c) => {
            let ctx = Context::new("train-teacher", c)?;
            let out = ctx.out()?;
            out.reserve(&["teacher.ckpt", "metrics.log", "manifest.toml"])?;
            let (mut teacher, mut state) = match &c.checkpoint {
                Some(_) => {
                    let ck = ctx.require_checkpoint(c)?;
                    let st = ck.train_state(ctx.config.train.optimizer, ctx.config.train.weight_decay);
                    (ck.to_teacher()?, st)
                }
                None => {
                    let spec = ctx.config.network_spec()?;
                    (
                        Teacher::new(&spec, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?,
                        TrainState::new(&ctx.config.train),
                    )
                }
            };
            let (train, test) = ctx.datasets(&teacher.spec)?;
            let mut sink = out.metrics()?;
            let hist = train_teacher(
                &mut teacher,
                &ctx.config.train,
                &train,
                Some(&test),
                &mut state,
                &mut sink,
            )?;
            Checkpoint::from_teacher(&teacher, Some(&state)).save(&out.path("teacher.ckpt")?)?;
            ctx.write_manifest()?;
            Ok(match hist.last() {
                Some(m) => format!(
                    "phase=teacher epochs={} train_loss={:.6} val_acc={:.4}",
                    hist.len(),
                    m.loss,
                    m.val_acc.unwrap_or(f64::NAN)
                ),
                None => "phase=teacher epochs=0".to_string(),
            })
        }
        Command::TrainMain(a) => train_student_phase(a, Phase::Main, "train-main"),
        Command::TrainShortcut(a) => train_student_phase(a, Phase::Shortcut, "train-shortcut"),
        Command::Finetune(a) => train_student_phase(a, Phase::Finetune, "finetune"),
        Command::Select(c) => {
            let ctx = Context::new("select", c)?;
            let out = ctx.out()?;
            out.reserve(&["student.ckpt", "selection.tsv", "manifest.toml"])?;
            let ck = ctx.require_checkpoint(c)?;
            let mut student = ck.to_student()?;
            let report = select_channels(&mut student, &ctx.config.compress.policy())?;
            let state = ck.train_state(ctx.config.train.optimizer, ctx.config.train.weight_decay);
            Checkpoint::from_student(&student, Some(&state), Some(&report)).save(&out.path("student.ckpt")?)?;
            out.write("selection.tsv", report.to_tsv().as_bytes())?;
            ctx.write_manifest()?;
            Ok(format!(
                "strategy={} epsilon={} budget={} kept={} overhead={:.6} slack={:.6}",
                report.strategy.as_str(),
                report.epsilon,
                report.budget,
                report.total_kept,
                overhead_fraction(&student),
                rounding_slack(&student)
            ))
        }
        Command::Sparsify(c) => {
            let ctx = Context::new("sparsify", c)?;
            let out = ctx.out()?;
            out.reserve(&["student.ckpt", "manifest.toml"])?;
            let ck = ctx.require_checkpoint(c)?;
            let mut student = ck.to_student()?;
            let zeroed = sparsify_interaction(&mut student, ctx.config.compress.keep_threshold)?;
            let state = ck.train_state(ctx.config.train.optimizer, ctx.config.train.weight_decay);
            Checkpoint::from_student(&student, Some(&state), ck.meta.selection.as_ref())
                .save(&out.path("student.ckpt")?)?;
            ctx.write_manifest()?;
            let nnz: usize = student.branches().map(|(_, _, b)| b.interaction_nnz()).sum();
            Ok(format!(
                "zeroed={zeroed} interaction_nnz={nnz} overhead={:.6}",
                overhead_fraction(&student)
            ))
        }
        Command::Eval(a) => {
            let (ctx, report) = evaluate_checkpoint(a, "eval", false)?;
            let mut text = format!("top1={:.6} samples={}", report.top1, report.samples);
            for (i, r) in report.residuals.iter().enumerate() {
                text.push_str(&format!(" residual_{i}={r:.9}"));
            }
            if let Some(out) = &ctx.out {
                out.write("eval.txt", format!("{text}\n").as_bytes())?;
                ctx.write_manifest()?;
            }
            Ok(text)
        }
        Command::Residuals(a) => {
            let (ctx, report) = evaluate_checkpoint(a, "residuals", true)?;
            let table = residual_table(&report);
            if let Some(out) = &ctx.out {
                out.write("residuals.tsv", table.as_bytes())?;
                ctx.write_manifest()?;
            }
            Ok(table.trim_end().to_string())
        }
        Command::Cost(c) => {
            let ctx = Context::new("cost", c)?;
            let (spec, student) = match &c.checkpoint {
                Some(_) => {
                    let ck = ctx.require_checkpoint(c)?;
                    let s = match ck.meta.kind {
                        ModelKind::Student => Some(ck.to_student()?),
                        ModelKind::Teacher => None,
                    };
                    (ck.spec.clone(), s)
                }
                None => (ctx.config.network_spec()?, None),
            };
            let mut rows = standard_rows(&spec);
            let mut text = String::new();
            if let Some(s) = &student {
                let report = cost_of(&s.spec, &CompressionState::from_student(s));
                rows.push(("checkpoint".to_string(), report.clone()));
                text.push_str(&cost_table(&rows));
                text.push('\n');
                text.push_str(&block_table(&report));
                text.push_str(&format!("rounding_slack\t{:.6}\n", rounding_slack(s)));
            } else {
                text.push_str(&cost_table(&rows));
            }
            if let Some(out) = &ctx.out {
                out.write("cost.tsv", text.as_bytes())?;
                ctx.write_manifest()?;
            }
            Ok(text.trim_end().to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!(
                "error command={} category={} message={message:?}",
                cli.command.name(),
                e.category()
            );
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_categories() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::MissingData("d".into())), 3);
        assert_eq!(
            exit_code(&Error::Divergence {
                step: 1,
                detail: "nan".into()
            }),
            4
        );
        assert_eq!(exit_code(&Error::Corruption("x".into())), 1);
    }
}

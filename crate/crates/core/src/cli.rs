//! The `tgrow` command line. Exit codes: 0 success, 1 domain failure
//! (verification failed, invalid schedule, non-finite loss), 2 usage or
//! format errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, read_header};
use crate::error::Error;
use crate::model::{Model, ModelConfig};
use crate::plan::Plan;
use crate::train::{self, Optimizer, OptimizerState, Task, TaskKind};
use crate::transforms::{apply_schedule, TransformSpec};
use crate::verify::{compare_models, sample_inputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tgrow",
    version,
    about = "Grow transformer checkpoints without changing what they compute"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Copy,
    Reverse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptArg {
    Sgd,
    Adam,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a randomly initialized checkpoint from a JSON config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        stddev: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply an expansion plan to a checkpoint.
    Apply {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Permit plans that fill zero-constrained blocks (breaks preservation).
        #[arg(long)]
        allow_unsafe: bool,
    },
    /// Check that two checkpoints compute the same function.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 32)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Print the config, tensor directory and parameter count of a checkpoint.
    Info { ckpt: PathBuf },
    /// Per-tensor differences between two checkpoints.
    Diff { a: PathBuf, b: PathBuf },
    /// Train on a toy task, optionally expanding partway through.
    Train {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long, value_enum, default_value = "sgd")]
        opt: OptArg,
        #[arg(long, default_value_t = 0.0)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, requires = "plan")]
        expand_at: Option<usize>,
        #[arg(long, requires = "expand_at")]
        plan: Option<PathBuf>,
        #[arg(long)]
        allow_unsafe: bool,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn domain(message: impl ToString) -> Self {
        Failure {
            code: EXIT_FAIL,
            message: message.to_string(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

fn load_model(path: &Path) -> Result<Model, Failure> {
    checkpoint::load(path).map_err(Failure::usage)
}

fn load_plan(path: &Path, allow_unsafe: bool) -> Result<Vec<TransformSpec>, Failure> {
    let plan = Plan::load(path).map_err(Failure::usage)?;
    if plan.has_unsafe() && !allow_unsafe {
        return Err(Failure::usage(
            "plan uses unsafe_fill, which breaks function preservation; pass --allow-unsafe to proceed",
        ));
    }
    plan.to_specs().map_err(Failure::usage)
}

fn save_model(model: &Model, path: &Path) -> Result<(), Failure> {
    checkpoint::save_model(model, path).map_err(Failure::usage)
}

fn cmd_init(out: &mut dyn Write, config: &Path, seed: u64, stddev: f64, dest: &Path) -> CmdResult {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::usage(format!("{}: {e}", config.display())))?;
    let config = ModelConfig::from_json(&text).map_err(Failure::usage)?;
    let model = Model::init(config, seed, stddev).map_err(Failure::domain)?;
    save_model(&model, dest)?;
    writeln!(out, "params={}", model.params.scalar_count()).ok();
    Ok(EXIT_OK)
}

fn cmd_apply(out: &mut dyn Write, input: &Path, plan: &Path, dest: &Path, allow_unsafe: bool) -> CmdResult {
    let model = load_model(input)?;
    let specs = load_plan(plan, allow_unsafe)?;
    let (config, params, audit) = apply_schedule(&model.config, &model.params, &specs).map_err(Failure::domain)?;
    for entry in &audit {
        writeln!(out, "{entry}").ok();
    }
    save_model(&Model { config, params }, dest)?;
    Ok(EXIT_OK)
}

fn cmd_verify(out: &mut dyn Write, a: &Path, b: &Path, inputs: usize, seed: u64, tol: f64) -> CmdResult {
    let ma = load_model(a)?;
    let mb = load_model(b)?;
    if inputs == 0 {
        return Err(Failure::usage("--inputs must be >= 1"));
    }
    let samples = sample_inputs(&ma.config, inputs, seed);
    let report = compare_models(&ma, &mb, &samples, tol).map_err(Failure::usage)?;
    writeln!(out, "{report}").ok();
    Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_info(out: &mut dyn Write, path: &Path) -> CmdResult {
    let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let model = checkpoint::from_bytes(&bytes).map_err(Failure::usage)?;
    let (header, _) = read_header(&bytes).map_err(Failure::usage)?;
    writeln!(out, "config {}", model.config).ok();
    for t in &header.tensors {
        writeln!(out, "tensor {} {}x{} offset={}", t.name, t.rows, t.cols, t.offset_bytes).ok();
    }
    writeln!(out, "params={}", model.params.scalar_count()).ok();
    Ok(EXIT_OK)
}

fn cmd_diff(out: &mut dyn Write, a: &Path, b: &Path) -> CmdResult {
    let entries = checkpoint::diff(a, b).map_err(Failure::usage)?;
    for e in entries {
        writeln!(out, "{e}").ok();
    }
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    out: &mut dyn Write,
    ckpt: &Path,
    task: TaskArg,
    steps: usize,
    optimizer: Optimizer,
    seed: u64,
    batch_size: usize,
    dest: &Path,
    curve_path: Option<&Path>,
    expansion: Option<(usize, Vec<TransformSpec>)>,
) -> CmdResult {
    let model = load_model(ckpt)?;
    if batch_size == 0 {
        return Err(Failure::usage("--batch-size must be >= 1"));
    }
    let task = Task {
        kind: match task {
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::Reverse => TaskKind::Reverse,
        },
        seq_len: model.config.max_seq,
        vocab: model.config.vocab.min(model.config.out_dim),
    };
    let expand_at = match &expansion {
        Some((at, _)) if *at > steps => {
            return Err(Failure::usage(format!("--expand-at {at} is beyond --steps {steps}")))
        }
        Some((at, _)) => *at,
        None => steps,
    };
    let to_failure = |e: Error| match e {
        Error::NonFiniteLoss { .. } => Failure::domain(e),
        Error::Schedule { .. } => Failure::domain(e),
        other => Failure::usage(other),
    };

    let Model { mut config, mut params } = model;
    let mut opt = OptimizerState::new(optimizer, &params);
    let (p, o, mut curve) =
        train::train_steps_from(&config, &params, &opt, &task, 0, expand_at, batch_size, seed).map_err(to_failure)?;
    params = p;
    opt = o;
    if let Some((at, specs)) = expansion {
        let (c2, p2, o2, report) =
            train::expand_mid_training(&config, &params, &opt, &specs, &task, seed).map_err(to_failure)?;
        writeln!(
            out,
            "expand@{at} loss_before={} loss_after={} rel_change={:e}",
            report.loss_before,
            report.loss_after,
            report.relative_change()
        )
        .ok();
        let (p3, _, rest) =
            train::train_steps_from(&c2, &p2, &o2, &task, at, steps - at, batch_size, seed).map_err(to_failure)?;
        config = c2;
        params = p3;
        curve.extend(rest);
    }
    if let Some(path) = curve_path {
        train::write_curve(path, &curve).map_err(Failure::usage)?;
    }
    save_model(&Model { config, params }, dest)?;
    match curve.last() {
        Some(last) => writeln!(out, "steps={} final_loss={last}", curve.len()).ok(),
        None => writeln!(out, "steps=0").ok(),
    };
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::Init {
            config,
            seed,
            stddev,
            out: dest,
        } => cmd_init(out, &config, seed, stddev, &dest),
        Command::Apply {
            input,
            plan,
            out: dest,
            allow_unsafe,
        } => cmd_apply(out, &input, &plan, &dest, allow_unsafe),
        Command::Verify {
            a,
            b,
            inputs,
            seed,
            tol,
        } => cmd_verify(out, &a, &b, inputs, seed, tol),
        Command::Info { ckpt } => cmd_info(out, &ckpt),
        Command::Diff { a, b } => cmd_diff(out, &a, &b),
        Command::Train {
            ckpt,
            task,
            steps,
            lr,
            opt,
            momentum,
            seed,
            batch_size,
            out: dest,
            curve,
            expand_at,
            plan,
            allow_unsafe,
        } => {
            let optimizer = match opt {
                OptArg::Sgd => Optimizer::sgd(lr, momentum),
                OptArg::Adam => Optimizer::adam(lr),
            };
            let expansion = match (expand_at, plan) {
                (Some(at), Some(plan)) => Some((at, load_plan(&plan, allow_unsafe)?)),
                _ => None,
            };
            cmd_train(
                out,
                &ckpt,
                task,
                steps,
                optimizer,
                seed,
                batch_size,
                &dest,
                curve.as_deref(),
                expansion,
            )
        }
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// normal output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                write!(err, "{e}").ok();
            } else {
                write!(out, "{e}").ok();
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(f) => {
            writeln!(err, "error: {}", f.message).ok();
            f.code
        }
    }
}

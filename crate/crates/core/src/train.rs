//! Toy sequence tasks, SGD/Adam, and expansion in the middle of training.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{backward, cross_entropy_loss, forward_with_tape};
use crate::error::{Error, Result};
use crate::model::{validate, ModelConfig, ModelParams, ParamGrads};
use crate::tensor::Prng;
use crate::transforms::{apply_schedule, expand_state_schedule, AuditEntry, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Targets equal the inputs.
    Copy,
    /// Targets are the inputs reversed.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
}

impl Task {
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.seq_len > config.max_seq {
            return Err(Error::invalid(format!(
                "task seq_len {} outside 1..={}",
                self.seq_len, config.max_seq
            )));
        }
        if self.vocab == 0 || self.vocab > config.vocab || self.vocab > config.out_dim {
            return Err(Error::invalid(format!(
                "task vocab {} exceeds model vocab {} or out_dim {}",
                self.vocab, config.vocab, config.out_dim
            )));
        }
        Ok(())
    }

    pub fn targets(&self, tokens: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => tokens.to_vec(),
            TaskKind::Reverse => tokens.iter().rev().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn make_batch(task: &Task, batch_size: usize, seed: u64) -> Vec<Example> {
    let mut rng = Prng::new(seed);
    (0..batch_size)
        .map(|_| {
            let tokens: Vec<usize> = (0..task.seq_len).map(|_| rng.next_below(task.vocab)).collect();
            let targets = task.targets(&tokens);
            Example { tokens, targets }
        })
        .collect()
}

/// Mean loss over the batch and its gradient.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[Example],
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let (logits, tape) = forward_with_tape(params, &ex.tokens, config)?;
        let (loss, dlogits) = cross_entropy_loss(&logits, &ex.targets)?;
        total += loss;
        let g = backward(&tape, &dlogits.scale(scale), params, config)?;
        for ((_, acc), (_, gi)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(gi)?;
        }
    }
    Ok((total * scale, grads))
}

pub fn batch_loss(params: &ModelParams, config: &ModelConfig, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let logits = crate::model::forward(params, &ex.tokens, config)?;
        total += cross_entropy_loss(&logits, &ex.targets)?.0;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyper-parameters plus per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    /// SGD velocity or Adam first moment.
    pub first: ModelParams,
    /// Adam second moment; zeros and unused for SGD.
    pub second: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, params: &ModelParams) -> Self {
        OptimizerState {
            kind,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let slots = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in slots {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            match self.kind {
                Optimizer::Sgd { lr, momentum } => {
                    for i in 0..p.len() {
                        m[i] = momentum * m[i] + g[i];
                        p[i] -= lr * m[i];
                    }
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Batch seed for step `i` of a run seeded with `seed`.
fn step_seed(seed: u64, i: usize) -> u64 {
    Prng::derive(seed, &[i as u64]).next_u64()
}

/// Runs `steps` optimizer steps, returning the per-step mean batch loss.
/// Each step's batch is a function of `(seed, step index)` only.
pub fn train_steps(
    config: &ModelConfig,
    params: &ModelParams,
    opt: &OptimizerState,
    task: &Task,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ModelParams, OptimizerState, Vec<f64>)> {
    train_steps_from(config, params, opt, task, 0, steps, batch_size, seed)
}

/// [`train_steps`] starting at step index `first_step`, so a run split in
/// two (for example around an expansion) sees the same batches as an
/// uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_steps_from(
    config: &ModelConfig,
    params: &ModelParams,
    opt: &OptimizerState,
    task: &Task,
    first_step: usize,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ModelParams, OptimizerState, Vec<f64>)> {
    task.check(config)?;
    validate(params, config).map_err(Error::Validation)?;
    validate(&opt.first, config).map_err(Error::Validation)?;
    validate(&opt.second, config).map_err(Error::Validation)?;
    let mut params = params.clone();
    let mut opt = opt.clone();
    let mut curve = Vec::with_capacity(steps);
    for step in first_step..first_step + steps {
        let batch = make_batch(task, batch_size, step_seed(seed, step));
        let (loss, grads) = batch_loss_and_grads(&params, config, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        curve.push(loss);
        opt.update(&mut params, &grads);
    }
    Ok((params, opt, curve))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub audit: Vec<AuditEntry>,
}

impl ContinuityReport {
    pub fn relative_change(&self) -> f64 {
        (self.loss_after - self.loss_before).abs() / self.loss_before.abs()
    }
}

/// Held-out evaluation batch used around an expansion.
pub fn eval_batch(task: &Task, seed: u64) -> Vec<Example> {
    make_batch(task, 16, Prng::derive(seed, &[u64::MAX]).next_u64())
}

/// Applies `schedule` to the parameters and grows the optimizer moments to
/// match (zeros in every new slot, existing moments untouched). The report
/// holds the held-out loss right before and right after the expansion.
pub fn expand_mid_training(
    config: &ModelConfig,
    params: &ModelParams,
    opt: &OptimizerState,
    schedule: &[TransformSpec],
    task: &Task,
    eval_seed: u64,
) -> Result<(ModelConfig, ModelParams, OptimizerState, ContinuityReport)> {
    let held_out = eval_batch(task, eval_seed);
    let loss_before = batch_loss(params, config, &held_out)?;
    let (next_cfg, next_params, audit) = apply_schedule(config, params, schedule)?;
    let next_opt = OptimizerState {
        kind: opt.kind,
        first: expand_state_schedule(config, &opt.first, schedule)?,
        second: expand_state_schedule(config, &opt.second, schedule)?,
        step: opt.step,
    };
    let loss_after = batch_loss(&next_params, &next_cfg, &held_out)?;
    Ok((
        next_cfg,
        next_params,
        next_opt,
        ContinuityReport {
            loss_before,
            loss_after,
            audit,
        },
    ))
}

/// `step,loss` CSV with shortest round-trip float formatting.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        writeln!(out, "{i},{loss}").unwrap();
    }
    out
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, curve_csv(curve)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

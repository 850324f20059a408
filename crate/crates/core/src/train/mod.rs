//! Deterministic fine-tuning on desk-scale models with hand-derived
//! gradients.

mod experiments;
mod gradcheck;
mod model;
mod optim;

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use experiments::{
    experiment_loss_compare, experiment_rank_recovery, experiment_subspace_alignment, match_budget, planar_toynet,
    rank_recovery_default_train, rank_recovery_problem, LossCompareReport, MethodResult, RankRecoveryProblem, RankRecoveryReport,
    SubspaceReport, ToyNetConfig,
};
pub use gradcheck::{finite_difference_grad, grad_check, max_relative_error};
pub use model::{LinearTask, Model, Task, ToyNet, Tuning};
pub use optim::{ADAMW_BETA1, ADAMW_BETA2, ADAMW_EPS, ADAMW_WEIGHT_DECAY};

use crate::adapters::{AdapterSpec, AdapterState};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Losses above this abort a run.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    AdamW,
    /// Steepest descent with a parabolic line search along `−g`; exact on
    /// quadratics, backtracking when the parabola overshoots.
    LineSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    /// Rows per step; `None` is full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Decoupled weight decay; `None` means 0.01 for AdamW and 0 otherwise.
    pub weight_decay: Option<f64>,
    pub momentum: f64,
    /// `None` trains the weight directly.
    pub adapter: Option<AdapterSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            steps: 1000,
            batch_size: None,
            seed: 0,
            weight_decay: None,
            momentum: 0.9,
            adapter: None,
        }
    }
}

impl TrainConfig {
    pub fn resolved_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerKind::AdamW => ADAMW_WEIGHT_DECAY,
            _ => 0.0,
        })
    }

    /// Every violated constraint, in field order.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive and finite, got {}", self.learning_rate));
        }
        if self.batch_size == Some(0) {
            errs.push("batch_size must be at least 1".to_string());
        }
        let wd = self.resolved_weight_decay();
        if !(wd >= 0.0 && wd.is_finite()) {
            errs.push(format!("weight_decay must be finite and nonnegative, got {wd}"));
        }
        if self.optimizer == OptimizerKind::LineSearch && wd != 0.0 {
            errs.push("weight_decay is not supported with the line-search optimizer".to_string());
        }
        if self.optimizer == OptimizerKind::LineSearch && self.batch_size.is_some() {
            errs.push("line-search optimizer requires full batches".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub metric: Option<f64>,
    pub param_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// One row per step including step 0, unless the run diverged.
    pub rows: Vec<TraceRow>,
    /// Step at which the loss left the finite range below [`DIVERGENCE_LOSS`].
    pub diverged_at: Option<usize>,
    pub terminal: Option<AdapterState>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// `step,loss,metric,param_norm`, LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,metric,param_norm\n");
        for r in &self.rows {
            let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, metric, r.param_norm);
        }
        out
    }

    /// Turns a diverged run into an error.
    pub fn check(&self) -> Result<()> {
        match self.diverged_at {
            Some(step) => Err(Error::Training {
                step,
                reason: format!("loss {} exceeded {DIVERGENCE_LOSS:e}", self.final_loss()),
            }),
            None => Ok(()),
        }
    }
}

fn row(model: &Model, step: usize, loss: f64) -> Result<TraceRow> {
    Ok(TraceRow {
        step,
        loss,
        metric: model.metric()?,
        param_norm: model.param_norm(),
    })
}

fn diverging(loss: f64) -> bool {
    !(loss.is_finite() && loss <= DIVERGENCE_LOSS)
}

/// Full-data loss, with non-finite values reported as infinite so the
/// caller can record a divergence instead of failing outright.
fn guarded_loss(model: &Model) -> Result<f64> {
    match model.loss() {
        Err(Error::NonFinite { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// Runs `cfg.steps` optimizer steps on `model` in place.
///
/// Only the tensors listed by [`Model::params`] change. A loss above
/// [`DIVERGENCE_LOSS`] stops the run with the trace so far.
pub fn train(model: &mut Model, cfg: &TrainConfig) -> Result<TrainTrace> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Precondition(errs.join("; ")));
    }
    let samples = model.task.samples();
    let batch = cfg.batch_size.filter(|&b| b < samples);
    let mut rng = seeded(cfg.seed);
    let mut opt = optim::Optimizer::new(cfg, &model.params());
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut diverged_at = None;

    let mut current = guarded_loss(model)?;
    for step in 0..=cfg.steps {
        rows.push(row(model, step, current)?);
        if diverging(current) {
            diverged_at = Some(step);
            break;
        }
        if step == cfg.steps {
            break;
        }
        let picked = batch.map(|b| index::sample(&mut rng, samples, b).into_vec());
        let grads = match model.loss_and_grad(picked.as_deref()) {
            Ok((_, g)) => g,
            Err(Error::NonFinite { context }) => {
                return Err(Error::Training { step, reason: context });
            }
            Err(e) => return Err(e),
        };
        if cfg.optimizer == OptimizerKind::LineSearch {
            current = optim::line_search_step(model, &grads, current, cfg.learning_rate)?;
        } else {
            opt.step(&mut model.params_mut(), &grads);
            current = guarded_loss(model)?;
        }
    }
    Ok(TrainTrace {
        rows,
        diverged_at,
        terminal: model.adapter().cloned(),
    })
}

#[cfg(test)]
mod tests;

use super::{Model, OptimizerKind, TrainConfig};
use crate::error::Result;

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

pub(crate) struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    t: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub(crate) fn new(cfg: &TrainConfig, params: &[&[f64]]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        let second = if cfg.optimizer == OptimizerKind::AdamW { zeros() } else { Vec::new() };
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            weight_decay: cfg.resolved_weight_decay(),
            momentum: cfg.momentum,
            t: 0,
            first: zeros(),
            second,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.t += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        let bias1 = 1.0 - ADAMW_BETA1.powi(self.t);
        let bias2 = 1.0 - ADAMW_BETA2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (x, &gi)) in p.iter_mut().zip(g).enumerate() {
                let update = match self.kind {
                    OptimizerKind::Sgd | OptimizerKind::LineSearch => gi,
                    OptimizerKind::SgdMomentum => {
                        let v = &mut self.first[k][i];
                        *v = self.momentum * *v + gi;
                        *v
                    }
                    OptimizerKind::AdamW => {
                        let m = &mut self.first[k][i];
                        *m = ADAMW_BETA1 * *m + (1.0 - ADAMW_BETA1) * gi;
                        let v = &mut self.second[k][i];
                        *v = ADAMW_BETA2 * *v + (1.0 - ADAMW_BETA2) * gi * gi;
                        (self.first[k][i] / bias1) / ((self.second[k][i] / bias2).sqrt() + ADAMW_EPS)
                    }
                };
                *x -= lr * (update + wd * *x);
            }
        }
    }
}

fn moved(model: &Model, grads: &[Vec<f64>], alpha: f64) -> Model {
    let mut m = model.clone();
    for (p, g) in m.params_mut().into_iter().zip(grads) {
        for (x, gi) in p.iter_mut().zip(g) {
            *x -= alpha * gi;
        }
    }
    m
}

fn loss_or_inf(model: &Model) -> Result<f64> {
    super::guarded_loss(model)
}

/// One steepest-descent step with a parabolic fit through `α ∈ {0, α₀, 2α₀}`;
/// never accepts a step that increases the loss. Returns the new loss.
pub(crate) fn line_search_step(model: &mut Model, grads: &[Vec<f64>], f0: f64, alpha0: f64) -> Result<f64> {
    let f1 = loss_or_inf(&moved(model, grads, alpha0))?;
    let f2 = loss_or_inf(&moved(model, grads, 2.0 * alpha0))?;
    let curvature = (f2 - 2.0 * f1 + f0) / (2.0 * alpha0 * alpha0);
    let slope = (4.0 * f1 - 3.0 * f0 - f2) / (2.0 * alpha0);
    let mut alpha = if curvature > 0.0 && curvature.is_finite() {
        -slope / (2.0 * curvature)
    } else {
        alpha0
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        alpha = alpha0;
    }
    for _ in 0..60 {
        let candidate = moved(model, grads, alpha);
        let f = loss_or_inf(&candidate)?;
        if f <= f0 {
            *model = candidate;
            return Ok(f);
        }
        alpha *= 0.5;
    }
    Ok(f0)
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, LinearTask, Model, Task, ToyNet, TrainConfig, TrainTrace, Tuning};
use crate::adapters::{trainable_param_count, Adapter, AdapterBase, AdapterExtras, AdapterKind, AdapterSpec};
use crate::error::{Error, Result};
use crate::linalg::{principal_angles, svd_thin, Matrix};
use crate::rank::construct_min_rank;
use crate::rng::{gaussian, gaussian_matrix, random_orthonormal, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyNetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub samples: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Standard deviation of the random initial weights.
    pub init_std: f64,
    /// Out-of-plane perturbation added to the last trained neuron, relative
    /// to the mean neuron norm.
    pub noise_scale: f64,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 3,
            hidden_dim: 8,
            samples: 16,
            weight_decay: 0.01,
            seed: 0,
            init_std: 0.5,
            noise_scale: 0.3,
        }
    }
}

impl ToyNetConfig {
    /// Plain gradient descent long enough for weight decay to remove the
    /// out-of-plane components.
    pub fn default_train() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            steps: 30_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_dim != 3 {
            errs.push(format!("input_dim must be 3 (data in the xy-plane of R^3), got {}", self.input_dim));
        }
        if self.hidden_dim < 2 {
            errs.push(format!("hidden_dim must be at least 2, got {}", self.hidden_dim));
        }
        if self.samples == 0 {
            errs.push("samples must be positive".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be finite and nonnegative, got {}", self.weight_decay));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            errs.push(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push(format!("noise_scale must be finite and nonnegative, got {}", self.noise_scale));
        }
        errs
    }
}

fn fail_on(errs: Vec<String>) -> Result<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Precondition(errs.join("; ")))
    }
}

/// Planar data (third coordinate exactly 0), targets `|x₁| − x₂/2`, and a
/// random initial `(W₁, w₂)`.
pub fn planar_toynet(cfg: &ToyNetConfig) -> Result<(ToyNet, Matrix, Vec<f64>)> {
    fail_on(cfg.validate())?;
    let mut rng = seeded(cfg.seed);
    let mut x = Matrix::zeros(cfg.samples, 3);
    let mut y = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let (a, b) = (gaussian(&mut rng), gaussian(&mut rng));
        x[(i, 0)] = a;
        x[(i, 1)] = b;
        y.push(a.abs() - 0.5 * b);
    }
    let w1 = gaussian_matrix(&mut rng, cfg.hidden_dim, 3, cfg.init_std);
    let w2 = (0..cfg.hidden_dim).map(|_| cfg.init_std * gaussian(&mut rng)).collect();
    let net = ToyNet {
        x,
        y,
        weight_decay: cfg.weight_decay,
    };
    Ok((net, w1, w2))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubspaceReport {
    pub weight_decay: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub diverged: bool,
    /// `max_j |w_j3| / mean_j ‖w_j‖` over first-layer neurons.
    pub out_of_plane_max: f64,
    pub out_of_plane_abs_max: f64,
    pub mean_neuron_norm: f64,
    /// Largest principal angle between the top-2 right singular vectors of
    /// `W₁` and the data plane, radians.
    pub plane_angle: f64,
    pub objective: f64,
    /// Objective after zeroing every neuron's out-of-plane component.
    pub projected_objective: f64,
    pub noisy_neuron: usize,
    /// Angle of the perturbed neuron to the plane.
    pub noisy_neuron_angle: f64,
    /// Angle of the top right singular vector of the perturbed `W₁` to the plane.
    pub noisy_top_angle: f64,
    pub losses: Vec<f64>,
}

fn plane_basis() -> Matrix {
    Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]])
}

/// Angle between a nonzero vector of R³ and the xy-plane.
fn angle_to_plane(v: &[f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v[2].abs() / norm).clamp(0.0, 1.0).asin()
}

/// Trains the two-layer ReLU network on planar data and measures how far the
/// first-layer neurons leave the data plane.
pub fn experiment_subspace_alignment(cfg: &ToyNetConfig, train_cfg: &TrainConfig) -> Result<SubspaceReport> {
    if train_cfg.adapter.is_some() {
        return Err(Error::Precondition("the subspace experiment trains the full network; drop `adapter`".into()));
    }
    let (net, w1, w2) = planar_toynet(cfg)?;
    let mut model = Model::new(Task::ToyNet(net), Tuning::Full(w1)).with_head(w2);
    let trace = train(&mut model, train_cfg)?;
    let w1 = model.weight()?;
    let h = w1.rows();

    let norms: Vec<f64> = (0..h).map(|j| w1.row(j).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mean_norm = norms.iter().sum::<f64>() / h as f64;
    let abs_max = (0..h).map(|j| w1[(j, 2)].abs()).fold(0.0, f64::max);

    let d = svd_thin(&w1)?;
    let top2 = d.v().leading(3, 2);
    let plane_angle = principal_angles(&top2, &plane_basis())?.into_iter().fold(0.0, f64::max);

    let objective = model.loss()?;
    let mut projected = model.clone();
    if let Tuning::Full(w) = &mut projected.tuning {
        for j in 0..h {
            w[(j, 2)] = 0.0;
        }
    }
    let projected_objective = projected.loss()?;

    let noisy = h - 1;
    let mut noisy_w1 = w1.clone();
    noisy_w1[(noisy, 2)] += cfg.noise_scale * mean_norm;
    let noisy_neuron_angle = angle_to_plane(noisy_w1.row(noisy));
    let nd = svd_thin(&noisy_w1)?;
    let noisy_top_angle = angle_to_plane(&nd.v().col(0));

    Ok(SubspaceReport {
        weight_decay: cfg.weight_decay,
        steps: train_cfg.steps,
        final_loss: trace.final_loss(),
        diverged: trace.diverged_at.is_some(),
        out_of_plane_max: if mean_norm > 0.0 { abs_max / mean_norm } else { f64::INFINITY },
        out_of_plane_abs_max: abs_max,
        mean_neuron_norm: mean_norm,
        plane_angle,
        objective,
        projected_objective,
        noisy_neuron: noisy,
        noisy_neuron_angle,
        noisy_top_angle,
        losses: trace.losses(),
    })
}

/// Gradient descent settings that converge on the default 8 x 12 problem.
pub fn rank_recovery_default_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        steps: 20_000,
        ..TrainConfig::default()
    }
}

/// `W₀ = U diag(n, n−1, …, 1) Vᵀ` and the target `W*` with the top `2r`
/// triplets removed, observed through whitened random inputs so that the
/// loss equals `‖W − W*‖²_F`.
#[derive(Debug, Clone)]
pub struct RankRecoveryProblem {
    pub w0: Matrix,
    pub target: Matrix,
    pub singular_values: Vec<f64>,
    pub task: LinearTask,
    /// Smallest `‖W₀ + ΔW − W*‖_F` over rank-`r` changes `ΔW`.
    pub floor: f64,
}

pub fn rank_recovery_problem(n: usize, m: usize, r: usize, seed: u64) -> Result<RankRecoveryProblem> {
    if !(2 * r <= n && n <= m) {
        return Err(Error::Precondition(format!(
            "rank recovery needs 2r <= n <= m, got n = {n}, m = {m}, r = {r}"
        )));
    }
    let mut rng = seeded(seed);
    let u = random_orthonormal(&mut rng, n, n);
    let v = random_orthonormal(&mut rng, m, n);
    let s: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
    let w0 = u.scale_cols(&s).matmul_t(&v)?;
    let kept: Vec<usize> = (2 * r..n).collect();
    let target = u.select_cols(&kept).scale_cols(&s[2 * r..]).matmul_t(&v.select_cols(&kept))?;
    let floor = s[r..2 * r].iter().map(|x| x * x).sum::<f64>().sqrt();
    let samples = 2 * m;
    let x = random_orthonormal(&mut rng, samples, m).scale((samples as f64).sqrt());
    let y = x.matmul_t(&target)?;
    Ok(RankRecoveryProblem {
        w0,
        target,
        singular_values: s,
        task: LinearTask { x, y },
        floor,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodResult {
    pub label: String,
    /// `None` for full fine-tuning.
    pub kind: Option<AdapterKind>,
    pub rank: usize,
    pub trainable: usize,
    pub terminal_distance: f64,
    pub final_loss: f64,
    pub diverged: bool,
    pub losses: Vec<f64>,
}

fn run_method(problem: &RankRecoveryProblem, spec: Option<AdapterSpec>, cfg: &TrainConfig) -> Result<MethodResult> {
    let mut model = Model::with_spec(Task::Linear(problem.task.clone()), problem.w0.clone(), spec.as_ref())?
        .with_reference(problem.target.clone());
    let cfg = TrainConfig {
        adapter: spec.clone(),
        ..cfg.clone()
    };
    let trace: TrainTrace = train(&mut model, &cfg)?;
    let (label, kind, rank) = match &spec {
        Some(s) if s.kind == AdapterKind::SVDiff => ("SVDiff".to_string(), Some(s.kind), s.rank),
        Some(s) => (format!("{}_r{}", s.kind, s.rank), Some(s.kind), s.rank),
        None => ("full".to_string(), None, 0),
    };
    Ok(MethodResult {
        label,
        kind,
        rank,
        trainable: model.num_trainable(),
        terminal_distance: model.metric()?.unwrap_or(f64::NAN),
        final_loss: trace.final_loss(),
        diverged: trace.diverged_at.is_some(),
        losses: trace.losses(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RankRecoveryReport {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub singular_values: Vec<f64>,
    pub target_norm: f64,
    /// Eckart–Young lower bound on LoRA's distance to the target.
    pub lora_floor: f64,
    /// Distance reached by the explicit Spectral^A minimum-rank parameters.
    pub certificate_distance: f64,
    pub lora: MethodResult,
    pub spectral: MethodResult,
}

/// Fits `W*` (rank `n − 2r`) from `W₀` with LoRA(r) and Spectral^A(r).
pub fn experiment_rank_recovery(n: usize, m: usize, r: usize, seed: u64, cfg: &TrainConfig) -> Result<RankRecoveryReport> {
    let problem = rank_recovery_problem(n, m, r, seed)?;
    let base = AdapterBase::new(problem.w0.clone())?;
    let cert = construct_min_rank(AdapterKind::SpectralA, base.decomposition(), r)?;
    let certificate_distance = cert.effective_weight(&base)?.sub(&problem.target)?.frobenius_norm();
    let lora = run_method(&problem, Some(AdapterSpec::new(AdapterKind::LoRA, r).with_seed(seed)), cfg)?;
    let spectral = run_method(&problem, Some(AdapterSpec::new(AdapterKind::SpectralA, r).with_seed(seed)), cfg)?;
    Ok(RankRecoveryReport {
        n,
        m,
        r,
        singular_values: problem.singular_values.clone(),
        target_norm: problem.target.frobenius_norm(),
        lora_floor: problem.floor,
        certificate_distance,
        lora,
        spectral,
    })
}

/// Hyperparameter of `kind` whose budget is the largest not exceeding
/// `target`, or the cheapest one when none fits.
pub fn match_budget(kind: AdapterKind, n: usize, m: usize, target: usize, extras: &AdapterExtras) -> Option<usize> {
    let k = n.min(m);
    let candidates: Vec<usize> = match kind {
        AdapterKind::SVDiff => vec![0],
        AdapterKind::OFT => (1..=n).filter(|d| n % d == 0).collect(),
        _ => (0..=k).collect(),
    };
    let cost = |r: usize| trainable_param_count(kind, n, m, r, extras);
    let fitting = candidates.iter().copied().filter(|&r| cost(r) <= target).max_by_key(|&r| (cost(r), r));
    fitting.or_else(|| candidates.iter().copied().min_by_key(|&r| cost(r)))
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCompareReport {
    pub n: usize,
    pub m: usize,
    pub lora_rank: usize,
    pub budget: usize,
    pub lora_floor: f64,
    pub target_norm: f64,
    pub runs: Vec<MethodResult>,
}

impl LossCompareReport {
    /// `step,<label>,…` with one loss column per run; shorter (diverged)
    /// runs leave trailing cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for run in &self.runs {
            out.push(',');
            out.push_str(&run.label);
        }
        out.push('\n');
        let len = self.runs.iter().map(|r| r.losses.len()).max().unwrap_or(0);
        for step in 0..len {
            let _ = write!(out, "{step}");
            for run in &self.runs {
                out.push(',');
                if let Some(l) = run.losses.get(step) {
                    let _ = write!(out, "{l}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains LoRA, Spectral^A, Spectral^R, OFT, SVDiff and full fine-tuning on
/// the rank-recovery problem, each at the budget closest to LoRA(r) from
/// below.
pub fn experiment_loss_compare(n: usize, m: usize, r: usize, seed: u64, cfg: &TrainConfig) -> Result<LossCompareReport> {
    let problem = rank_recovery_problem(n, m, r, seed)?;
    let extras = AdapterExtras::default();
    let budget = trainable_param_count(AdapterKind::LoRA, n, m, r, &extras);
    let mut runs = Vec::new();
    for kind in [
        AdapterKind::LoRA,
        AdapterKind::SpectralA,
        AdapterKind::SpectralR,
        AdapterKind::OFT,
        AdapterKind::SVDiff,
    ] {
        let rank = match_budget(kind, n, m, budget, &extras)
            .ok_or_else(|| Error::Precondition(format!("no valid hyperparameter for {kind}")))?;
        let spec = AdapterSpec::new(kind, rank).with_seed(seed);
        runs.push(run_method(&problem, Some(spec), cfg)?);
    }
    runs.push(run_method(&problem, None, cfg)?);
    Ok(LossCompareReport {
        n,
        m,
        lora_rank: r,
        budget,
        lora_floor: problem.floor,
        target_norm: problem.target.frobenius_norm(),
        runs,
    })
}

//! Merging several adapters trained on the same base.

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterBase, AdapterState, SpectralAState};
use crate::error::{Error, Result};
use crate::linalg::{ColumnSelect, Lu, Matrix};
use crate::rng::trial_rng;

/// `λ_i = 1/n`.
pub fn default_lambdas(n: usize) -> Vec<f64> {
    vec![1.0 / n.max(1) as f64; n]
}

/// `θ₀ + Σ λ_i Δθ_i`, accumulated left to right.
pub fn fedavg_merge(base: &Matrix, deltas: &[Matrix], lambdas: &[f64]) -> Result<Matrix> {
    if deltas.len() != lambdas.len() {
        return Err(Error::shape(
            "fedavg_merge",
            format!("{} deltas but {} weights", deltas.len(), lambdas.len()),
        ));
    }
    let mut out = base.clone();
    for (d, &l) in deltas.iter().zip(lambdas) {
        if !l.is_finite() {
            return Err(Error::Precondition(format!("fusion weight {l} is not finite")));
        }
        out.axpy(l, d)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePolicy {
    /// Concept `i` takes columns `[i·r, (i+1)·r)`.
    ContiguousTop,
    /// Each concept draws `r` distinct columns from the top `K`.
    Sampled,
    /// Columns are given per entry.
    Explicit,
}

/// Column allocation for `num_concepts` rank-`r` spectral adapters over `k`
/// singular triplets. `pool` is the sampled policy's `K` (default `k`).
pub fn schedule_columns(
    num_concepts: usize,
    r: usize,
    k: usize,
    policy: SchedulePolicy,
    pool: Option<usize>,
    seed: u64,
) -> Result<Vec<ColumnSelect>> {
    match policy {
        SchedulePolicy::ContiguousTop => {
            if num_concepts * r > k {
                return Err(Error::Precondition(format!(
                    "contiguous allocation of {num_concepts} x {r} columns exceeds the {k} available"
                )));
            }
            Ok((0..num_concepts).map(|i| ColumnSelect::range(i * r, r)).collect())
        }
        SchedulePolicy::Sampled => {
            let pool = pool.unwrap_or(k);
            if pool > k || r > pool {
                return Err(Error::Precondition(format!(
                    "cannot sample {r} columns from a pool of {pool} (k = {k})"
                )));
            }
            (0..num_concepts)
                .map(|i| {
                    let mut rng = trial_rng(seed, i as u64);
                    ColumnSelect::from_indices(rand::seq::index::sample(&mut rng, pool, r).into_vec())
                })
                .collect()
        }
        SchedulePolicy::Explicit => Err(Error::Precondition(
            "explicit policy takes its columns from the plan entries".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionEntry {
    pub state: AdapterState,
    pub lambda: f64,
    /// Fingerprint of the decomposition the adapter was trained over.
    pub base_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overlap {
    pub first: usize,
    pub second: usize,
    pub columns: usize,
}

#[derive(Debug, Clone)]
pub struct FusionPlan {
    pub base: AdapterBase,
    pub entries: Vec<FusionEntry>,
    pub policy: SchedulePolicy,
}

impl FusionPlan {
    pub fn new(base: AdapterBase, policy: SchedulePolicy) -> Self {
        Self {
            base,
            entries: Vec::new(),
            policy,
        }
    }

    /// Adds an adapter trained over this plan's base.
    pub fn push(&mut self, state: AdapterState, lambda: f64) {
        let base_fingerprint = self.base.fingerprint().to_string();
        self.entries.push(FusionEntry {
            state,
            lambda,
            base_fingerprint,
        });
    }

    /// Pairwise shared columns between spectral entries, nonzero only.
    pub fn overlaps(&self) -> Vec<Overlap> {
        let mut out = Vec::new();
        for (i, a) in self.entries.iter().enumerate() {
            for (j, b) in self.entries.iter().enumerate().skip(i + 1) {
                if let (Some(ca), Some(cb)) = (a.state.columns(), b.state.columns()) {
                    let columns = ca.overlap(cb);
                    if columns > 0 {
                        out.push(Overlap {
                            first: i,
                            second: j,
                            columns,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn warnings(&self) -> Vec<String> {
        self.overlaps()
            .into_iter()
            .map(|o| format!("entries {} and {} share {} columns", o.first, o.second, o.columns))
            .collect()
    }

    /// Every entry was trained over this base and has a finite weight.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.base_fingerprint != self.base.fingerprint() {
                return Err(Error::Precondition(format!(
                    "entry {i} was trained over base {} but the plan's base is {}",
                    e.base_fingerprint,
                    self.base.fingerprint()
                )));
            }
            if !e.lambda.is_finite() {
                return Err(Error::Precondition(format!("entry {i} has non-finite weight {}", e.lambda)));
            }
        }
        Ok(())
    }

    /// `W_i − θ₀` per entry, with the entry weights.
    pub fn deltas(&self) -> Result<(Vec<Matrix>, Vec<f64>)> {
        self.validate()?;
        let mut deltas = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            deltas.push(e.state.effective_weight(&self.base)?.sub(self.base.weight())?);
        }
        Ok((deltas, self.entries.iter().map(|e| e.lambda).collect()))
    }

    fn spectral_entries(&self) -> Result<Vec<(&SpectralAState, f64)>> {
        self.validate()?;
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| match &e.state {
                AdapterState::SpectralA(s) => Ok((s, e.lambda)),
                other => Err(Error::Precondition(format!(
                    "spectral fusion needs SpectralA entries; entry {i} is {}",
                    other.kind()
                ))),
            })
            .collect()
    }
}

fn padded_sums(plan: &FusionPlan) -> Result<(Matrix, Matrix)> {
    let entries = plan.spectral_entries()?;
    let d = plan.base.decomposition();
    let (n, m) = plan.base.shape();
    let k = d.k();
    let mut p = Matrix::zeros(n, k);
    let mut q = Matrix::zeros(m, k);
    for (state, lambda) in entries {
        state.columns.validate(k)?;
        let idx = state.columns.indices();
        let mut pad_u = Matrix::zeros(n, k);
        pad_u.assign_cols(&idx, &state.a_u);
        let mut pad_v = Matrix::zeros(m, k);
        pad_v.assign_cols(&idx, &state.a_v);
        p.axpy(lambda, &pad_u)?;
        q.axpy(lambda, &pad_v)?;
    }
    Ok((p, q))
}

/// The fused factors `U₀ + Σλ_i pad(A_U⁽ⁱ⁾)` and `V₀ + Σλ_i pad(A_V⁽ⁱ⁾)`.
pub fn spectral_fuse_factors(plan: &FusionPlan) -> Result<(Matrix, Matrix)> {
    let (p, q) = padded_sums(plan)?;
    let d = plan.base.decomposition();
    Ok((d.u().add(&p)?, d.v().add(&q)?))
}

/// `(U₀ + Σλ_i pad(A_U⁽ⁱ⁾)) S₀ (V₀ + Σλ_i pad(A_V⁽ⁱ⁾))ᵀ`, evaluated as the base
/// weight plus the expanded change so a single entry with `λ = 1` matches
/// [`crate::adapters::merge`].
pub fn spectral_fuse(plan: &FusionPlan) -> Result<Matrix> {
    let (p, q) = padded_sums(plan)?;
    let d = plan.base.decomposition();
    // (U₀+P) S (V₀+Q)ᵀ − U₀ S V₀ᵀ = P S (V₀+Q)ᵀ + U₀ S Qᵀ
    let s = d.s();
    let delta = p
        .scale_cols(s)
        .matmul_t(&d.v().add(&q)?)?
        .add(&d.u().scale_cols(s).matmul_t(&q)?)?;
    plan.base.weight().add(&delta)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientFusion {
    #[serde(skip)]
    pub theta: Matrix,
    pub ridge: f64,
    pub objective: f64,
    /// `‖∇‖_F` of the ridge-regularized objective at `theta`.
    pub optimality_residual: f64,
}

/// `Σ_i ‖(θ₀ + Δθ_i) X_i − θ X_i‖²_F`.
pub fn gradient_fusion_objective(theta: &Matrix, base: &Matrix, deltas: &[Matrix], activations: &[Matrix]) -> Result<f64> {
    let mut total = 0.0;
    for (d, x) in deltas.iter().zip(activations) {
        let r = base.add(d)?.sub(theta)?.matmul(x)?;
        total += r.as_slice().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Default ridge `1e-8 · trace(Σ X_i X_iᵀ) / m`.
pub fn default_ridge(activations: &[Matrix]) -> f64 {
    let m = activations.first().map_or(1, Matrix::rows).max(1);
    let trace: f64 = activations.iter().map(|x| x.as_slice().iter().map(|v| v * v).sum::<f64>()).sum();
    1e-8 * trace / m as f64
}

/// Closed-form minimizer `θ = [Σ(θ₀+Δθ_i) X_i X_iᵀ] [Σ X_i X_iᵀ + ridge·I]⁻¹`.
pub fn gradient_fusion(base: &Matrix, deltas: &[Matrix], activations: &[Matrix], ridge: Option<f64>) -> Result<GradientFusion> {
    if deltas.len() != activations.len() {
        return Err(Error::shape(
            "gradient_fusion",
            format!("{} deltas but {} activation batches", deltas.len(), activations.len()),
        ));
    }
    let (n, m) = base.shape();
    let ridge = ridge.unwrap_or_else(|| default_ridge(activations));
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Precondition(format!("ridge must be finite and nonnegative, got {ridge}")));
    }
    if deltas.is_empty() {
        return Ok(GradientFusion {
            theta: base.clone(),
            ridge,
            objective: 0.0,
            optimality_residual: 0.0,
        });
    }
    let mut gram = Matrix::zeros(m, m);
    let mut rhs = Matrix::zeros(n, m);
    for (d, x) in deltas.iter().zip(activations) {
        if x.rows() != m {
            return Err(Error::shape(
                "gradient_fusion",
                format!("activation batch has {} rows, base has {m} columns", x.rows()),
            ));
        }
        let xxt = x.matmul_t(x)?;
        gram = gram.add(&xxt)?;
        rhs = rhs.add(&base.add(d)?.matmul(&xxt)?)?;
    }
    for i in 0..m {
        gram[(i, i)] += ridge;
    }
    let lu = Lu::new(
        &gram,
        "gradient fusion: Σ X_i X_iᵀ is singular; pass a positive ridge",
    )?;
    // θ G = B with G symmetric, so Gᵀ θᵀ = Bᵀ.
    let theta = lu.solve(&rhs.transpose())?.transpose();
    let grad = theta.matmul(&gram)?.sub(&rhs)?.scale(2.0);
    let objective = gradient_fusion_objective(&theta, base, deltas, activations)?;
    Ok(GradientFusion {
        theta,
        ridge,
        objective,
        optimality_residual: grad.frobenius_norm(),
    })
}

/// Per concept, `‖(fused − W_i) P_i‖_F / ‖W_i P_i‖_F` with `W_i` the
/// concept's individually merged weight and `P_i` its probe inputs.
pub fn identity_preservation_report(
    base: &AdapterBase,
    states: &[AdapterState],
    fused: &Matrix,
    probes: &[Matrix],
) -> Result<Vec<f64>> {
    if states.len() != probes.len() {
        return Err(Error::shape(
            "identity_preservation_report",
            format!("{} concepts but {} probe batches", states.len(), probes.len()),
        ));
    }
    states
        .iter()
        .zip(probes)
        .map(|(s, p)| {
            let own = s.effective_weight(base)?;
            let reference = own.matmul(p)?.frobenius_norm();
            let dev = fused.sub(&own)?.matmul(p)?.frobenius_norm();
            Ok(if reference > 0.0 { dev / reference } else { dev })
        })
        .collect()
}

//! Rank capacity: the spread between the lowest and highest rank an adapter
//! can give the adapted weight.
//!
//! The minimum is certified constructively where a construction is known
//! (LoRA, Spectral^A, SVDiff); the maximum is taken over random parameter
//! draws, each from its own deterministic stream.

use serde::Serialize;

use crate::adapters::{
    Adapter, AdapterBase, AdapterKind, AdapterSpec, AdapterState, LoRAState, SVDiffState, SpectralAState,
};
use crate::error::{Error, Result};
use crate::linalg::{default_rank_tol, numerical_rank, svd_thin, ColumnSelect, Matrix, SpectralDecomposition};
use crate::rng::trial_rng;

#[derive(Debug, Clone, Serialize)]
pub struct RankCapacityReport {
    pub kind: AdapterKind,
    pub rank: usize,
    pub base_rank: usize,
    pub min_rank_achieved: usize,
    pub max_rank_achieved: usize,
    pub capacity: usize,
    pub trials: usize,
    /// Numerical rank of each random trial, in trial order.
    pub trial_ranks: Vec<usize>,
    /// Parameters achieving `min_rank_achieved`.
    #[serde(skip)]
    pub certificate: AdapterState,
}

/// Default rank threshold for capacity checks on `base`.
pub fn capacity_tol(base: &SpectralDecomposition) -> f64 {
    let (n, m) = base.shape();
    default_rank_tol(n, m, base.s().first().copied().unwrap_or(0.0))
}

fn require_full_rank(base: &Matrix, tol: Option<f64>) -> Result<usize> {
    let required = base.rows().min(base.cols());
    let rank = numerical_rank(base, tol)?;
    if rank < required {
        return Err(Error::RankDeficient { rank, required });
    }
    Ok(rank)
}

/// Parameters that push the adapted weight to its lowest rank.
///
/// LoRA cancels the top `r` singular triplets. Spectral^A tunes the top `r`
/// columns so that they cancel themselves and the next `r` triplets, which
/// needs `2r ≤ min(n, m)`.
pub fn construct_min_rank(kind: AdapterKind, base: &SpectralDecomposition, r: usize) -> Result<AdapterState> {
    let (n, m) = base.shape();
    let k = base.k();
    let top = ColumnSelect::top(r);
    let tuned = top.indices();
    match kind {
        AdapterKind::LoRA => {
            if r > k {
                return Err(Error::Precondition(format!("LoRA rank {r} exceeds min(n, m) = {k}")));
            }
            let s = &base.s()[..r];
            Ok(AdapterState::LoRA(LoRAState {
                a: base.u().select_cols(&tuned).scale_cols(s).scale(-1.0),
                b: base.v().select_cols(&tuned),
                scale: 1.0,
            }))
        }
        AdapterKind::SpectralA => {
            if 2 * r > k {
                return Err(Error::Precondition(format!(
                    "SpectralA minimum-rank construction needs 2r <= min(n, m); got r = {r}, min(n, m) = {k}"
                )));
            }
            let borrowed: Vec<usize> = (r..2 * r).collect();
            let u1 = base.u().select_cols(&tuned);
            let v1 = base.v().select_cols(&tuned);
            let uj = base.u().select_cols(&borrowed);
            let vj = base.v().select_cols(&borrowed);
            // (U_J) S_1 (−V_J S_J / S_1)ᵀ = −U_J S_J V_Jᵀ.
            let ratio: Vec<f64> = (0..r).map(|i| base.s()[r + i] / base.s()[i]).collect();
            let mut state = SpectralAState::zeros(n, m, top);
            state.a_u = uj.sub(&u1)?;
            state.a_v = vj.scale_cols(&ratio).add(&v1)?.scale(-1.0);
            Ok(AdapterState::SpectralA(state))
        }
        AdapterKind::SVDiff => Ok(AdapterState::SVDiff(SVDiffState {
            delta_s: base.s().iter().map(|s| -s).collect(),
        })),
        other => Err(Error::Precondition(format!("no minimum-rank construction for {other}"))),
    }
}

/// Empirical rank capacity of `kind` at hyperparameter `r` on `base`.
///
/// The maximum is over the zero state and `trials` Gaussian draws of the
/// trainable parameters; the minimum is the certificate where one exists,
/// else the lowest rank observed.
///
/// Adapted weights are evaluated against the reconstruction of the base
/// decomposition, and the default threshold is scaled by the base's largest
/// singular value rather than the adapted weight's: cancelled directions
/// then sit at rounding level of the base, not of what is left over.
pub fn rank_capacity_empirical(
    kind: AdapterKind,
    base: &Matrix,
    r: usize,
    trials: usize,
    seed: u64,
    tol: Option<f64>,
) -> Result<RankCapacityReport> {
    let base_rank = require_full_rank(base, tol)?;
    let d = svd_thin(base)?;
    let tol = Some(tol.unwrap_or_else(|| capacity_tol(&d)));
    let adapter_base = AdapterBase::from_decomposition(d);
    let spec = AdapterSpec::new(kind, r).with_seed(seed);
    let init = spec.init(&adapter_base)?;

    let mut trial_ranks = Vec::with_capacity(trials);
    let mut lowest = (base_rank, init.clone());
    for t in 0..trials {
        let mut state = AdapterSpec::new(kind, r).with_seed(seed.wrapping_add(t as u64)).init(&adapter_base)?;
        state.perturb(&mut trial_rng(seed, t as u64), 1.0);
        let rank = numerical_rank(&state.effective_weight(&adapter_base)?, tol)?;
        if rank < lowest.0 {
            lowest = (rank, state);
        }
        trial_ranks.push(rank);
    }
    let max_rank_achieved = trial_ranks.iter().copied().fold(base_rank, usize::max);

    let (min_rank_achieved, certificate) = match kind {
        AdapterKind::LoRA | AdapterKind::SpectralA | AdapterKind::SVDiff => {
            let cert = construct_min_rank(kind, adapter_base.decomposition(), r)?;
            let rank = numerical_rank(&cert.effective_weight(&adapter_base)?, tol)?;
            if rank <= lowest.0 {
                (rank, cert)
            } else {
                lowest
            }
        }
        _ => lowest,
    };

    Ok(RankCapacityReport {
        kind,
        rank: r,
        base_rank,
        min_rank_achieved,
        max_rank_achieved,
        capacity: max_rank_achieved - min_rank_achieved,
        trials,
        trial_ranks,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};

    fn padded_diag() -> Matrix {
        let mut w = Matrix::zeros(4, 6);
        for (i, s) in [4.0, 3.0, 2.0, 1.0].into_iter().enumerate() {
            w[(i, i)] = s;
        }
        w
    }

    fn certified_rank(kind: AdapterKind, w: &Matrix, r: usize) -> usize {
        let base = AdapterBase::from_decomposition(svd_thin(w).unwrap());
        let state = construct_min_rank(kind, base.decomposition(), r).unwrap();
        let tol = capacity_tol(base.decomposition());
        numerical_rank(&state.effective_weight(&base).unwrap(), Some(tol)).unwrap()
    }

    #[test]
    fn full_cancellation_on_random_bases() {
        for seed in 0..50 {
            let w = gaussian_matrix(&mut seeded(seed), 6, 10, 1.0);
            assert_eq!(certified_rank(AdapterKind::SpectralA, &w, 3), 0);
            assert_eq!(certified_rank(AdapterKind::LoRA, &w, 6), 0);
        }
    }

    #[test]
    fn diagonal_certificates() {
        let w = padded_diag();
        assert_eq!(certified_rank(AdapterKind::LoRA, &w, 1), 3);
        assert_eq!(certified_rank(AdapterKind::SpectralA, &w, 1), 2);
        assert_eq!(certified_rank(AdapterKind::SpectralA, &w, 2), 0);
        assert_eq!(certified_rank(AdapterKind::SVDiff, &w, 0), 0);
        assert_eq!(certified_rank(AdapterKind::LoRA, &w, 0), 4);
    }

    #[test]
    fn spectral_a_rejects_oversized_rank() {
        let base = AdapterBase::new(padded_diag()).unwrap();
        assert!(construct_min_rank(AdapterKind::SpectralA, base.decomposition(), 3).is_err());
        assert!(construct_min_rank(AdapterKind::VeRA, base.decomposition(), 1).is_err());
    }

    #[test]
    fn random_base_capacities() {
        let w = gaussian_matrix(&mut seeded(42), 8, 12, 1.0);
        let lora = rank_capacity_empirical(AdapterKind::LoRA, &w, 2, 50, 1, None).unwrap();
        assert_eq!((lora.min_rank_achieved, lora.max_rank_achieved, lora.capacity), (6, 8, 2));
        let spec = rank_capacity_empirical(AdapterKind::SpectralA, &w, 2, 50, 1, None).unwrap();
        assert_eq!((spec.min_rank_achieved, spec.max_rank_achieved, spec.capacity), (4, 8, 4));
        for kind in [AdapterKind::SpectralR, AdapterKind::OFT] {
            let rep = rank_capacity_empirical(kind, &w, 2, 20, 1, None).unwrap();
            assert_eq!(rep.capacity, 0, "{kind}");
        }
    }

    #[test]
    fn rank_deficient_base_is_rejected() {
        let a = gaussian_matrix(&mut seeded(3), 6, 2, 1.0);
        let b = gaussian_matrix(&mut seeded(4), 2, 9, 1.0);
        let w = a.matmul(&b).unwrap();
        let err = rank_capacity_empirical(AdapterKind::LoRA, &w, 1, 5, 0, None).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 2, required: 6 }));
        assert!(err.to_string().contains("full row-rank"));
    }

    #[test]
    fn trials_are_reproducible() {
        let w = gaussian_matrix(&mut seeded(5), 6, 8, 1.0);
        let a = rank_capacity_empirical(AdapterKind::VeRA, &w, 2, 10, 9, None).unwrap();
        let b = rank_capacity_empirical(AdapterKind::VeRA, &w, 2, 10, 9, None).unwrap();
        assert_eq!(a.trial_ranks, b.trial_ranks);
    }
}

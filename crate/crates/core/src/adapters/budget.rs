//! Trainable-parameter accounting per adapter kind.

use std::collections::BTreeSet;

use super::baselines::OFTState;
use super::{AdapterExtras, AdapterKind};

/// Number of trainable scalars of `kind` on an `n x m` weight.
///
/// For OFT `rank` is the number of diagonal blocks; SVDiff ignores it.
/// Returns 0 for an OFT block count that does not tile `n`.
pub fn trainable_param_count(kind: AdapterKind, n: usize, m: usize, rank: usize, extras: &AdapterExtras) -> usize {
    match kind {
        AdapterKind::LoRA | AdapterKind::SpectralA => (n + m) * rank,
        AdapterKind::SpectralR => 2 * rank * rank,
        AdapterKind::SVDiff => n.min(m),
        AdapterKind::LiDB => (extras.lidb_a + extras.lidb_b) * rank,
        AdapterKind::VeRA => n + rank,
        AdapterKind::DoRAVector => m + (n + m) * rank,
        AdapterKind::OFT => match OFTState::block_layout(n, rank) {
            Ok((size, _)) if extras.oft_shared => size * size,
            Ok((_, sizes)) => sizes.iter().map(|s| s * s).sum(),
            Err(_) => 0,
        },
    }
}

/// `(hyperparameter, trainable count)` for every valid setting.
///
/// Ranks run over `1..=max_rank` (capped at `min(n, m)` for the spectral
/// kinds); OFT runs over the divisors of `n` regardless of `max_rank`;
/// SVDiff has the single setting 0.
pub fn budget_table(kind: AdapterKind, n: usize, m: usize, max_rank: usize, extras: &AdapterExtras) -> Vec<(usize, usize)> {
    let ranks: Vec<usize> = match kind {
        AdapterKind::SVDiff => vec![0],
        AdapterKind::OFT => (1..=n).filter(|d| n % d == 0).collect(),
        AdapterKind::SpectralA | AdapterKind::SpectralR => (1..=max_rank.min(n.min(m))).collect(),
        _ => (1..=max_rank).collect(),
    };
    ranks
        .into_iter()
        .map(|r| (r, trainable_param_count(kind, n, m, r, extras)))
        .filter(|&(_, c)| c > 0)
        .collect()
}

/// Sorted distinct budgets over [`budget_table`].
pub fn available_budgets(kind: AdapterKind, n: usize, m: usize, max_rank: usize, extras: &AdapterExtras) -> Vec<usize> {
    let set: BTreeSet<usize> = budget_table(kind, n, m, max_rank, extras).into_iter().map(|(_, c)| c).collect();
    set.into_iter().collect()
}

/// Square-weight budget and its proportionality.
pub fn scaling_formula(kind: AdapterKind) -> &'static str {
    match kind {
        AdapterKind::LoRA | AdapterKind::SpectralA => "2nr ∝ n",
        AdapterKind::SVDiff => "n ∝ n",
        AdapterKind::LiDB => "(a+b)r ∝ r",
        AdapterKind::OFT => "(n/r)² ∝ n/r",
        AdapterKind::VeRA => "n+r ∝ n",
        AdapterKind::SpectralR => "2r² ∝ r",
        AdapterKind::DoRAVector => "n+2nr ∝ n",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(kind: AdapterKind, n: usize, r: usize) -> usize {
        trainable_param_count(kind, n, n, r, &AdapterExtras::default())
    }

    #[test]
    fn lora_rank_one_matches_spectral_r_rank_32() {
        assert_eq!(count(AdapterKind::LoRA, 1024, 1), 2048);
        assert_eq!(count(AdapterKind::SpectralR, 1024, 32), 2048);
        assert_eq!(count(AdapterKind::SVDiff, 1024, 7), 1024);
    }

    #[test]
    fn budget_enumerations() {
        let e = AdapterExtras::default();
        assert_eq!(available_budgets(AdapterKind::SVDiff, 512, 512, 32, &e), vec![512]);
        assert_eq!(available_budgets(AdapterKind::OFT, 6, 6, 1, &e), vec![1, 4, 9, 36]);
        assert_eq!(available_budgets(AdapterKind::SpectralR, 64, 64, 4, &e), vec![2, 8, 18, 32]);
    }

    #[test]
    fn unshared_oft_sums_block_squares() {
        let e = AdapterExtras {
            oft_shared: false,
            ..AdapterExtras::default()
        };
        // 7 rows in 4 blocks of size 2: 2,2,2,1.
        assert_eq!(trainable_param_count(AdapterKind::OFT, 7, 7, 4, &e), 13);
        assert_eq!(trainable_param_count(AdapterKind::OFT, 7, 7, 5, &e), 0);
    }
}

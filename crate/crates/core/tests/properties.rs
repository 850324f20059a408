use proptest::prelude::*;
use spectral_adapter::adapters::{
    cayley, merge, Adapter, AdapterBase, AdapterKind, AdapterSpec, AdapterState, SpectralAState,
};
use spectral_adapter::fusion::{fedavg_merge, spectral_fuse, spectral_fuse_factors, FusionPlan, SchedulePolicy};
use spectral_adapter::io::{read_matrix, write_matrix};
use spectral_adapter::linalg::{orthogonality_defect, svd_thin};
use spectral_adapter::rng::{gaussian_matrix, seeded};
use spectral_adapter::{ColumnSelect, Matrix};

fn base(n: usize, m: usize, seed: u64) -> AdapterBase {
    AdapterBase::new(gaussian_matrix(&mut seeded(seed), n, m, 1.0)).unwrap()
}

fn perturbed_spectral(b: &AdapterBase, cols: ColumnSelect, seed: u64, v_zero: bool) -> SpectralAState {
    let r = cols.count();
    let mut s = AdapterSpec::new(AdapterKind::SpectralA, r).with_columns(cols).init(b).unwrap();
    s.perturb(&mut seeded(seed), 0.5);
    let AdapterState::SpectralA(mut s) = s else { unreachable!() };
    if v_zero {
        s.a_v = Matrix::zeros(s.a_v.rows(), s.a_v.cols());
    }
    s
}

fn plan_of(b: &AdapterBase, entries: &[(SpectralAState, f64)]) -> FusionPlan {
    let mut p = FusionPlan::new(b.clone(), SchedulePolicy::Explicit);
    for (s, l) in entries {
        p.push(AdapterState::SpectralA(s.clone()), *l);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cayley_is_orthogonal(r in 1usize..10, seed in any::<u64>(), scale in 0.01f64..10.0) {
        let raw = gaussian_matrix(&mut seeded(seed), r, r, scale);
        prop_assert!(orthogonality_defect(&cayley(&raw).unwrap()) <= 1e-10);
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal(n in 1usize..12, m in 1usize..12, seed in any::<u64>()) {
        let w = gaussian_matrix(&mut seeded(seed), n, m, 1.0);
        let d = svd_thin(&w).unwrap();
        prop_assert!(d.is_canonical());
        prop_assert!(w.sub(&d.reconstruct()).unwrap().frobenius_norm() <= 1e-12 * (1.0 + w.frobenius_norm()));
        prop_assert!(orthogonality_defect(d.u()) <= 1e-12 && orthogonality_defect(d.v()) <= 1e-12);
        prop_assert!(d.s().windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn zero_state_is_identity(n in 2usize..10, m in 2usize..10, seed in any::<u64>(), kind_idx in 0usize..8) {
        let kind = AdapterKind::ALL[kind_idx];
        let b = base(n, m, seed);
        let r = if kind == AdapterKind::OFT { 1 } else { 1.min(n.min(m)) };
        let state = AdapterSpec::new(kind, r).with_seed(seed).init(&b).unwrap();
        let w = state.effective_weight(&b).unwrap();
        prop_assert!(w.sub(b.weight()).unwrap().frobenius_norm() <= 1e-9 * (1.0 + b.weight().frobenius_norm()));
    }

    #[test]
    fn spectral_r_keeps_singular_values(n in 3usize..9, m in 3usize..9, r in 1usize..4, seed in any::<u64>()) {
        let b = base(n, m, seed);
        let r = r.min(n.min(m));
        let mut s = AdapterSpec::new(AdapterKind::SpectralR, r).init(&b).unwrap();
        s.perturb(&mut seeded(seed ^ 1), 1.0);
        let merged = svd_thin(&merge(&b, &s).unwrap()).unwrap();
        for (x, y) in merged.s().iter().zip(b.decomposition().s()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn spectral_fuse_is_linear_in_a_u(seed in any::<u64>(), l1 in -2.0f64..2.0, l2 in -2.0f64..2.0) {
        let b = base(6, 8, seed);
        let s = perturbed_spectral(&b, ColumnSelect::range(1, 2), seed, true);
        let w0 = b.weight();
        let f1 = spectral_fuse(&plan_of(&b, &[(s.clone(), l1)])).unwrap().sub(w0).unwrap();
        let f2 = spectral_fuse(&plan_of(&b, &[(s.clone(), l2)])).unwrap().sub(w0).unwrap();
        let f12 = spectral_fuse(&plan_of(&b, &[(s.clone(), l1 + l2)])).unwrap().sub(w0).unwrap();
        prop_assert!(f12.sub(&f1.add(&f2).unwrap()).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn spectral_fuse_is_symmetric(seed in any::<u64>(), l1 in -1.0f64..1.0, l2 in -1.0f64..1.0) {
        let b = base(6, 8, seed);
        let a = perturbed_spectral(&b, ColumnSelect::range(0, 3), seed, false);
        let c = perturbed_spectral(&b, ColumnSelect::range(2, 2), seed ^ 7, false);
        let x = spectral_fuse(&plan_of(&b, &[(a.clone(), l1), (c.clone(), l2)])).unwrap();
        let y = spectral_fuse(&plan_of(&b, &[(c, l2), (a, l1)])).unwrap();
        prop_assert!(x.sub(&y).unwrap().max_abs() <= 1e-13);
    }

    #[test]
    fn disjoint_columns_keep_integrity(seed in any::<u64>(), r in 1usize..3) {
        let b = base(7, 9, seed);
        let d = b.decomposition();
        let states: Vec<SpectralAState> = (0..3)
            .map(|i| perturbed_spectral(&b, ColumnSelect::range(i * r, r), seed.wrapping_add(i as u64), false))
            .collect();
        let plan = plan_of(&b, &states.iter().map(|s| (s.clone(), 1.0)).collect::<Vec<_>>());
        let (u, v) = spectral_fuse_factors(&plan).unwrap();
        for s in &states {
            let idx = s.columns.indices();
            prop_assert_eq!(u.select_cols(&idx), d.u().select_cols(&idx).add(&s.a_u).unwrap());
            prop_assert_eq!(v.select_cols(&idx), d.v().select_cols(&idx).add(&s.a_v).unwrap());
        }
    }

    #[test]
    fn fedavg_batches_equal_one_shot(seed in any::<u64>(), split in 0usize..5) {
        let mut rng = seeded(seed);
        let w = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let ds: Vec<Matrix> = (0..5).map(|_| gaussian_matrix(&mut rng, 3, 4, 1.0)).collect();
        let ls: Vec<f64> = (0..5).map(|i| 0.1 * (i + 1) as f64).collect();
        let once = fedavg_merge(&w, &ds, &ls).unwrap();
        let first = fedavg_merge(&w, &ds[..split], &ls[..split]).unwrap();
        prop_assert_eq!(fedavg_merge(&first, &ds[split..], &ls[split..]).unwrap(), once);
    }

    #[test]
    fn matrix_containers_round_trip(rows in 0usize..6, cols in 0usize..6, bits in prop::collection::vec(any::<u64>(), 36)) {
        let data: Vec<f64> = bits.iter().take(rows * cols).map(|&b| {
            let x = f64::from_bits(b);
            if x.is_finite() { x } else { f64::from_bits(b >> 12) }
        }).collect();
        let m = Matrix::from_vec(rows, cols, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.shape(), m.shape());
    }

    #[test]
    fn lora_rank_is_bounded(seed in any::<u64>(), r in 0usize..4) {
        let b = base(6, 9, seed);
        let mut s = AdapterSpec::new(AdapterKind::LoRA, r).init(&b).unwrap();
        s.perturb(&mut seeded(seed ^ 3), 1.0);
        let delta = merge(&b, &s).unwrap().sub(b.weight()).unwrap();
        prop_assert!(spectral_adapter::linalg::numerical_rank(&delta, None).unwrap() <= r);
    }
}

//! Checks against independent reference implementations written here.

use spectral_adapter::adapters::{cayley, merge, AdapterBase, AdapterKind, AdapterSpec, AdapterState};
use spectral_adapter::fusion::{fedavg_merge, gradient_fusion, schedule_columns, spectral_fuse, FusionPlan, SchedulePolicy};
use spectral_adapter::linalg::{numerical_rank, svd_thin};
use spectral_adapter::rng::{gaussian_matrix, seeded};
use spectral_adapter::train::rank_recovery_problem;
use spectral_adapter::Matrix;

use rand::Rng;

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                c[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    c
}

fn naive_transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.first().map_or(0, Vec::len);
    (0..m).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// One-sided Jacobi: singular values in descending order.
fn jacobi_singular_values(w: &Matrix) -> Vec<f64> {
    let mut a = if w.rows() >= w.cols() { to_rows(w) } else { to_rows(&w.transpose()) };
    let (n, m) = (a.len(), a[0].len());
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..m {
            for j in i + 1..m {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in &a {
                    alpha += r[i] * r[i];
                    beta += r[j] * r[j];
                    gamma += r[i] * r[j];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in a.iter_mut().take(n) {
                    let (x, y) = (r[i], r[j]);
                    r[i] = c * x - s * y;
                    r[j] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = (0..m).map(|j| a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Fraction-free Gaussian elimination over the integers.
fn bareiss_rank(a: &[Vec<i64>]) -> usize {
    let mut m: Vec<Vec<i128>> = a.iter().map(|r| r.iter().map(|&x| x as i128).collect()).collect();
    let (rows, cols) = (m.len(), m[0].len());
    let mut rank = 0;
    let mut prev = 1i128;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| m[r][c] != 0) else { continue };
        m.swap(rank, p);
        for r in rank + 1..rows {
            for k in c + 1..cols {
                m[r][k] = (m[rank][c] * m[r][k] - m[r][c] * m[rank][k]) / prev;
            }
            m[r][c] = 0;
        }
        prev = m[rank][c];
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

/// Gauss-Jordan inverse with partial pivoting.
fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap();
        aug.swap(c, p);
        let d = aug[c][c];
        for v in aug[c].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = aug[r][c];
                let pivot_row = aug[c].clone();
                for (v, pv) in aug[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[test]
fn singular_values_match_jacobi() {
    let mut rng = seeded(100);
    for (n, m) in [(1, 1), (3, 7), (7, 3), (8, 12), (12, 8), (16, 16), (5, 30)] {
        let w = gaussian_matrix(&mut rng, n, m, 2.0);
        let ours = svd_thin(&w).unwrap();
        let oracle = jacobi_singular_values(&w);
        let scale = oracle[0].max(1.0);
        for (a, b) in ours.s().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * scale, "{n}x{m}: {a} vs {b}");
        }
    }
}

#[test]
fn numerical_rank_matches_bareiss() {
    let mut rng = seeded(101);
    for trial in 0..40 {
        let (n, m) = (rng.random_range(2..9), rng.random_range(2..9));
        let k = rng.random_range(0..=n.min(m));
        let left: Vec<Vec<i64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-4..=4)).collect()).collect();
        let right: Vec<Vec<i64>> = (0..k).map(|_| (0..m).map(|_| rng.random_range(-4..=4)).collect()).collect();
        let prod: Vec<Vec<i64>> = (0..n)
            .map(|i| (0..m).map(|j| (0..k).map(|t| left[i][t] * right[t][j]).sum()).collect())
            .collect();
        let w = Matrix::from_fn(n, m, |i, j| prod[i][j] as f64);
        assert_eq!(numerical_rank(&w, None).unwrap(), bareiss_rank(&prod), "trial {trial}: {prod:?}");
    }
}

#[test]
fn cayley_matches_gauss_jordan() {
    let mut rng = seeded(102);
    for r in 1..8 {
        let raw = gaussian_matrix(&mut rng, r, r, 1.5);
        let q: Vec<Vec<f64>> = (0..r).map(|i| (0..r).map(|j| 0.5 * (raw[(i, j)] - raw[(j, i)])).collect()).collect();
        let eye = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        let plus: Vec<Vec<f64>> = (0..r).map(|i| (0..r).map(|j| eye(i, j) + q[i][j]).collect()).collect();
        let minus: Vec<Vec<f64>> = (0..r).map(|i| (0..r).map(|j| eye(i, j) - q[i][j]).collect()).collect();
        let oracle = naive_matmul(&plus, &gauss_jordan_inverse(&minus));
        let ours = cayley(&raw).unwrap();
        for i in 0..r {
            for j in 0..r {
                assert!((ours[(i, j)] - oracle[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sampled_overlap_follows_hypergeometric() {
    let (r, k, draws) = (4usize, 8usize, 10_000u64);
    let pmf: Vec<f64> = (0..=r as u64)
        .map(|j| binomial(r as u64, j) * binomial((k - r) as u64, r as u64 - j) / binomial(k as u64, r as u64))
        .collect();
    let mean: f64 = pmf.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
    assert!((mean - (r * r) as f64 / k as f64).abs() < 1e-12);
    let mut counts = vec![0u64; r + 1];
    for seed in 0..draws {
        let cols = schedule_columns(2, r, k, SchedulePolicy::Sampled, None, seed).unwrap();
        counts[cols[0].overlap(&cols[1])] += 1;
    }
    let observed: f64 = counts.iter().enumerate().map(|(j, &c)| j as f64 * c as f64).sum::<f64>() / draws as f64;
    let var: f64 = pmf.iter().enumerate().map(|(j, p)| (j as f64 - mean).powi(2) * p).sum();
    assert!((observed - mean).abs() < 4.0 * (var / draws as f64).sqrt(), "mean {observed} vs {mean}");
    for (j, (&c, &p)) in counts.iter().zip(&pmf).enumerate() {
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((c as f64 / draws as f64 - p).abs() < 5.0 * sd + 1e-12, "overlap {j}: {c} vs p={p}");
    }
}

#[test]
fn fedavg_matches_direct_summation() {
    let mut rng = seeded(103);
    let base = gaussian_matrix(&mut rng, 5, 6, 1.0);
    let deltas: Vec<Matrix> = (0..3).map(|_| gaussian_matrix(&mut rng, 5, 6, 1.0)).collect();
    let got = fedavg_merge(&base, &deltas, &[1.0 / 3.0; 3]).unwrap();
    for i in 0..5 {
        for j in 0..6 {
            let mean = (deltas[0][(i, j)] + deltas[1][(i, j)] + deltas[2][(i, j)]) / 3.0;
            assert!((got[(i, j)] - (base[(i, j)] + mean)).abs() < 1e-15 * 8.0);
        }
    }
}

#[test]
fn disjoint_spectral_fusion_matches_dense_product() {
    let mut rng = seeded(104);
    let (n, m, r) = (6, 9, 2);
    let base = AdapterBase::from_decomposition(svd_thin(&gaussian_matrix(&mut rng, n, m, 1.0)).unwrap());
    let mut plan = FusionPlan::new(base.clone(), SchedulePolicy::ContiguousTop);
    let mut states = Vec::new();
    for (i, cols) in schedule_columns(2, r, 6, SchedulePolicy::ContiguousTop, None, 0).unwrap().into_iter().enumerate() {
        let mut s = AdapterSpec::new(AdapterKind::SpectralA, r).with_columns(cols).init(&base).unwrap();
        s.perturb(&mut seeded(200 + i as u64), 0.4);
        plan.push(s.clone(), 1.0);
        states.push(s);
    }
    let d = base.decomposition();
    let mut u = to_rows(d.u());
    let mut v = to_rows(d.v());
    for s in &states {
        let AdapterState::SpectralA(s) = s else { unreachable!() };
        for (c, col) in s.columns.indices().into_iter().enumerate() {
            for i in 0..n {
                u[i][col] += s.a_u[(i, c)];
            }
            for i in 0..m {
                v[i][col] += s.a_v[(i, c)];
            }
        }
    }
    for row in u.iter_mut() {
        for (x, s) in row.iter_mut().zip(d.s()) {
            *x *= s;
        }
    }
    let oracle = naive_matmul(&u, &naive_transpose(&v));
    let fused = spectral_fuse(&plan).unwrap();
    for i in 0..n {
        for j in 0..m {
            assert!((fused[(i, j)] - oracle[i][j]).abs() < 1e-12, "({i},{j})");
        }
    }
    // λ = 1 on one entry alone is that entry's merge.
    let mut single = FusionPlan::new(base.clone(), SchedulePolicy::Explicit);
    single.push(states[1].clone(), 1.0);
    let diff = spectral_fuse(&single).unwrap().sub(&merge(&base, &states[1]).unwrap()).unwrap();
    assert!(diff.max_abs() <= 1e-12);
}

#[test]
fn gradient_fusion_matches_normal_equations() {
    let mut rng = seeded(105);
    let (n, m) = (4, 5);
    let base = gaussian_matrix(&mut rng, n, m, 1.0);
    let deltas: Vec<Matrix> = (0..2).map(|_| gaussian_matrix(&mut rng, n, m, 0.5)).collect();
    let acts: Vec<Matrix> = (0..2).map(|_| gaussian_matrix(&mut rng, m, 4, 1.0)).collect();
    let mut gram = vec![vec![0.0; m]; m];
    let mut rhs = vec![vec![0.0; m]; n];
    for (d, x) in deltas.iter().zip(&acts) {
        let xr = to_rows(x);
        let xxt = naive_matmul(&xr, &naive_transpose(&xr));
        let target = to_rows(&base.add(d).unwrap());
        let b = naive_matmul(&target, &xxt);
        for i in 0..m {
            for j in 0..m {
                gram[i][j] += xxt[i][j];
            }
        }
        for i in 0..n {
            for j in 0..m {
                rhs[i][j] += b[i][j];
            }
        }
    }
    let oracle = naive_matmul(&rhs, &gauss_jordan_inverse(&gram));
    let got = gradient_fusion(&base, &deltas, &acts, Some(0.0)).unwrap();
    for i in 0..n {
        for j in 0..m {
            assert!((got.theta[(i, j)] - oracle[i][j]).abs() < 1e-10);
        }
    }
}

#[test]
fn rank_recovery_floor_matches_jacobi_tail() {
    for seed in 0..3 {
        let p = rank_recovery_problem(8, 12, 2, seed).unwrap();
        let s = jacobi_singular_values(&p.target.sub(&p.w0).unwrap());
        let tail = s[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((p.floor - tail).abs() < 1e-10 * (1.0 + tail), "{} vs {tail}", p.floor);
    }
}

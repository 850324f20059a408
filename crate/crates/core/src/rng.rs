//! Seeded random generators. Every stochastic routine in the crate draws from
//! a `ChaCha8Rng` so results are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{qr_thin, Matrix};

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for trial `index` of a run seeded with `seed`, so
/// trials can be evaluated in any order.
pub fn trial_rng(seed: u64, index: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * gaussian(rng)).collect()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols, std)).expect("length matches")
}

/// `rows x cols` matrix with orthonormal columns (`rows >= cols`), Haar
/// distributed up to the sign fix of the QR factor.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    assert!(rows >= cols);
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    let (mut q, r) = qr_thin(&g);
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// `U · diag(singular_values) · Vᵀ` with random orthonormal factors.
pub fn matrix_with_spectrum<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, singular_values: &[f64]) -> Matrix {
    let k = singular_values.len();
    assert!(k <= rows.min(cols));
    let u = random_orthonormal(rng, rows, k);
    let v = random_orthonormal(rng, cols, k);
    u.scale_cols(singular_values).matmul_t(&v).expect("shapes agree")
}

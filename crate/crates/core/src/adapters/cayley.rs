//! Cayley parameterization of rotations: `raw ↦ (I + Q)(I − Q)⁻¹` with
//! `Q = (raw − rawᵀ)/2`.

use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};

/// Skew-symmetric part `(raw − rawᵀ)/2`.
pub fn skew(raw: &Matrix) -> Matrix {
    let n = raw.rows();
    Matrix::from_fn(n, n, |i, j| 0.5 * (raw[(i, j)] - raw[(j, i)]))
}

/// Orthogonal matrix from an arbitrary square generator.
pub fn cayley(raw: &Matrix) -> Result<Matrix> {
    Ok(CayleyMap::new(raw)?.rotation)
}

/// Forward value of the Cayley map with the factorization kept for the
/// backward pass.
pub struct CayleyMap {
    pub rotation: Matrix,
    /// `(I − Q)⁻¹`.
    inv_i_minus_q: Matrix,
}

impl CayleyMap {
    pub fn new(raw: &Matrix) -> Result<Self> {
        if raw.rows() != raw.cols() {
            return Err(Error::shape("cayley", format!("{}x{} generator is not square", raw.rows(), raw.cols())));
        }
        let n = raw.rows();
        let q = skew(raw);
        let mut i_minus_q = q.scale(-1.0);
        let mut i_plus_q = q;
        for i in 0..n {
            i_minus_q[(i, i)] += 1.0;
            i_plus_q[(i, i)] += 1.0;
        }
        // I − Q is invertible for every skew Q; failure means corrupted input.
        let lu = Lu::new(&i_minus_q, "cayley: I − Q (numerical corruption, I − Q is never singular for skew Q)")?;
        let inv = lu.inverse()?;
        // (I + Q) and (I − Q)⁻¹ commute.
        let rotation = i_plus_q.matmul(&inv)?;
        Ok(Self {
            rotation,
            inv_i_minus_q: inv,
        })
    }

    /// Pulls `∂L/∂R` back to `∂L/∂raw`.
    ///
    /// With `M = (I − Q)⁻¹`, `dR = M·dQ·(R + I)`, so `∂L/∂Q = Mᵀ·G·(R + I)ᵀ`
    /// and `∂L/∂raw = (∂L/∂Q − ∂L/∂Qᵀ)/2`.
    pub fn backward(&self, grad_rotation: &Matrix) -> Matrix {
        let n = self.rotation.rows();
        let mut r_plus_i = self.rotation.clone();
        for i in 0..n {
            r_plus_i[(i, i)] += 1.0;
        }
        let grad_q = self
            .inv_i_minus_q
            .t_matmul(grad_rotation)
            .and_then(|x| x.matmul_t(&r_plus_i))
            .expect("square factors of equal size");
        skew(&grad_q)
    }
}

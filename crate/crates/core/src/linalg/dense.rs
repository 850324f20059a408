//! LU and QR factorizations used by the solvers and the random generators.

use super::matrix::{norm2, Matrix};
use crate::error::{Error, Result};

/// LU factorization with partial pivoting, `P·A = L·U`.
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    /// Fails with [`Error::Singular`] when a pivot is exactly zero or below
    /// `n · eps` relative to the largest entry.
    pub fn new(a: &Matrix, context: &str) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::shape("lu", format!("{}x{} is not square", a.rows(), a.cols())));
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let tiny = a.max_abs() * n as f64 * f64::EPSILON;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || best <= tiny {
                return Err(Error::Singular {
                    context: format!("{context}: pivot {k} of {n} is {best:.3e}"),
                });
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    pub fn determinant(&self) -> f64 {
        (0..self.lu.rows()).fold(self.sign, |d, i| d * self.lu[(i, i)])
    }

    /// Solves `A · X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(Error::shape("lu solve", format!("rhs has {} rows, expected {n}", b.rows())));
        }
        let mut x = Matrix::from_fn(n, b.cols(), |i, j| b[(self.perm[i], j)]);
        for col in 0..b.cols() {
            for i in 0..n {
                let mut s = x[(i, col)];
                for k in 0..i {
                    s -= self.lu[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, col)];
                for k in i + 1..n {
                    s -= self.lu[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = s / self.lu[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.solve(&Matrix::identity(self.lu.rows()))
    }
}

pub fn determinant(a: &Matrix) -> Result<f64> {
    match Lu::new(a, "determinant") {
        Ok(lu) => Ok(lu.determinant()),
        Err(Error::Singular { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Thin Householder QR of a tall matrix: `A = Q·R` with `Q` of shape `n x k`,
/// `k = min(n, m)`, orthonormal columns.
pub fn qr_thin(a: &Matrix) -> (Matrix, Matrix) {
    let (n, m) = a.shape();
    let k = n.min(m);
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let x: Vec<f64> = (j..n).map(|i| r[(i, j)]).collect();
        let alpha = norm2(&x);
        let mut v = x;
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let s = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += s * alpha;
        let vn = norm2(&v);
        for e in v.iter_mut() {
            *e /= vn;
        }
        for c in j..m {
            let d: f64 = (j..n).map(|i| v[i - j] * r[(i, c)]).sum();
            for i in j..n {
                r[(i, c)] -= 2.0 * v[i - j] * d;
            }
        }
        reflectors.push(v);
    }
    let mut q = Matrix::zeros(n, k);
    for i in 0..k {
        q[(i, i)] = 1.0;
    }
    for j in (0..k).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for c in 0..k {
            let d: f64 = (j..n).map(|i| v[i - j] * q[(i, c)]).sum();
            for i in j..n {
                q[(i, c)] -= 2.0 * v[i - j] * d;
            }
        }
    }
    let r_thin = Matrix::from_fn(k, m, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    (q, r_thin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_and_determinant() {
        let a = Matrix::from_rows(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0], &[3.0, 0.0, 1.0]]);
        let lu = Lu::new(&a, "test").unwrap();
        // det by cofactor expansion: 0*(1) - 2*(1-0) + 1*(0-3) = -5
        assert!((lu.determinant() + 5.0).abs() < 1e-14);
        let b = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        let x = lu.solve(&b).unwrap();
        let back = a.matmul(&x).unwrap();
        assert!(back.sub(&b).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn singular_is_reported() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(Lu::new(&a, "t"), Err(Error::Singular { .. })));
        assert_eq!(determinant(&a).unwrap(), 0.0);
    }

    #[test]
    fn qr_reconstructs() {
        let a = Matrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let (q, r) = qr_thin(&a);
        assert!(q.t_matmul(&q).unwrap().sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-14);
        assert!(q.matmul(&r).unwrap().sub(&a).unwrap().max_abs() < 1e-13);
    }
}

use super::matrix::Matrix;
use super::svd::svd_thin;
use crate::error::{Error, Result};

/// Orthonormality tolerance for [`principal_angles`] inputs.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Default rank threshold `max(rows, cols) · s[0] · 2^-52`.
pub fn default_rank_tol(rows: usize, cols: usize, s_max: f64) -> f64 {
    rows.max(cols) as f64 * s_max * f64::EPSILON
}

/// Number of singular values strictly above `tol` (default threshold when `None`).
pub fn numerical_rank(w: &Matrix, tol: Option<f64>) -> Result<usize> {
    let d = svd_thin(w)?;
    let s = d.s();
    let s_max = s.first().copied().unwrap_or(0.0);
    let tol = tol.unwrap_or_else(|| default_rank_tol(w.rows(), w.cols(), s_max));
    Ok(s.iter().filter(|&&x| x > tol).count())
}

/// `‖mᵀm − I‖_F`.
pub fn orthogonality_defect(m: &Matrix) -> f64 {
    let mut g = m.t_matmul(m).expect("mᵀm is always defined");
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    g.frobenius_norm()
}

/// Principal angles in radians, non-decreasing, between the column spans of
/// two matrices with orthonormal columns.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "principal_angles",
            format!("bases live in R^{} and R^{}", a.rows(), b.rows()),
        ));
    }
    for (name, m) in [("a", a), ("b", b)] {
        let defect = orthogonality_defect(m);
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(Error::Precondition(format!(
                "principal_angles: basis {name} has orthogonality defect {defect:.3e} > {ORTHONORMAL_TOL:e}"
            )));
        }
    }
    let cross = a.t_matmul(b)?;
    let d = svd_thin(&cross)?;
    // Singular values are non-increasing, so the angles come out non-decreasing.
    Ok(d.s().iter().map(|c| c.clamp(0.0, 1.0).acos()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(4), None).unwrap(), 4);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 5), None).unwrap(), 0);
        assert_eq!(numerical_rank(&Matrix::diag(&[1.0, 1.0, 1e-18]), None).unwrap(), 2);
        assert_eq!(numerical_rank(&Matrix::diag(&[1.0, 1e-3]), Some(1e-2)).unwrap(), 1);
    }

    #[test]
    fn defect_examples() {
        assert_eq!(orthogonality_defect(&Matrix::identity(5)), 0.0);
        let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
        let rot = Matrix::from_rows(&[&[c, -s], &[s, c]]);
        assert!(orthogonality_defect(&rot) < 1e-15);
        assert_eq!(orthogonality_defect(&Matrix::diag(&[2.0, 1.0])), 3.0);
    }

    #[test]
    fn angle_examples() {
        let e = Matrix::identity(3);
        let first_two = e.select_cols(&[0, 1]);
        let same = principal_angles(&first_two, &first_two).unwrap();
        assert!(same.iter().all(|a| a.abs() < 1e-7));
        let e1 = e.select_cols(&[0]);
        let e2 = e.select_cols(&[1]);
        assert!((principal_angles(&e1, &e2).unwrap()[0] - FRAC_PI_2).abs() < 1e-15);
        let diag = Matrix::column(&[FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0]);
        assert!((principal_angles(&e1, &diag).unwrap()[0] - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn angles_reject_non_orthonormal() {
        let bad = Matrix::column(&[2.0, 0.0]);
        let err = principal_angles(&bad, &bad).unwrap_err();
        assert!(err.to_string().contains("defect"));
    }
}

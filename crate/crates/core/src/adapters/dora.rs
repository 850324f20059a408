//! Magnitude/direction adaptation and its correspondence with additive
//! spectral tuning of a vector weight.
//!
//! For a vector `w₀`, the DoRA form is `w̲ · (w₀ + b̲a̲)/‖w₀ + b̲a̲‖₂` and the
//! additive spectral form is `(w₀/‖w₀‖₂ + a′) · ‖w₀‖₂ · (1 + b′)`. The state
//! below applies the DoRA form column-wise to a matrix, with a rank-`r`
//! direction update; a single column with `r = 1` is the vector case.

use rand::Rng;
use serde::Serialize;

use super::{vec_tensor, Adapter, AdapterBase, AdapterKind, NamedTensor};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::rng::{gaussian_matrix, gaussian_vec, seeded};

#[derive(Debug, Clone, PartialEq)]
pub struct DoRAVectorState {
    /// Per-column magnitudes, initialized to the base column norms.
    pub magnitude: Vec<f64>,
    /// `n x r`, zero at init.
    pub direction_b: Matrix,
    /// `r x m`, Gaussian at init.
    pub direction_a: Matrix,
}

impl DoRAVectorState {
    pub fn init<R: Rng + ?Sized>(w0: &Matrix, r: usize, rng: &mut R) -> Result<Self> {
        let (n, m) = w0.shape();
        let magnitude = column_norms(w0);
        if let Some(j) = magnitude.iter().position(|&c| c == 0.0) {
            return Err(Error::Precondition(format!("DoRA needs nonzero base columns; column {j} is zero")));
        }
        Ok(Self {
            magnitude,
            direction_b: Matrix::zeros(n, r),
            direction_a: gaussian_matrix(rng, r, m, 1.0),
        })
    }

    fn check(&self, base: &AdapterBase) -> Result<()> {
        let (n, m) = base.shape();
        let r = self.direction_b.cols();
        if self.magnitude.len() != m || self.direction_b.shape() != (n, r) || self.direction_a.shape() != (r, m) {
            return Err(Error::shape(
                "DoRAVector",
                format!(
                    "magnitude {}, b {:?}, a {:?} for base {n}x{m}",
                    self.magnitude.len(),
                    self.direction_b.shape(),
                    self.direction_a.shape()
                ),
            ));
        }
        Ok(())
    }

    /// `W₀ + B·A` and its column norms.
    fn direction(&self, base: &AdapterBase) -> Result<(Matrix, Vec<f64>)> {
        let v = base.weight().add(&self.direction_b.matmul(&self.direction_a)?)?;
        let norms = column_norms(&v);
        if let Some(j) = norms.iter().position(|&c| c == 0.0) {
            return Err(Error::NonFinite {
                context: format!("DoRA direction column {j} has zero norm"),
            });
        }
        Ok((v, norms))
    }
}

fn column_norms(w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|j| norm2(&w.col(j))).collect()
}

impl Adapter for DoRAVectorState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::DoRAVector
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        self.check(base)?;
        let (v, norms) = self.direction(base)?;
        let scale: Vec<f64> = self.magnitude.iter().zip(&norms).map(|(g, c)| g / c).collect();
        Ok(v.scale_cols(&scale))
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check(base)?;
        let (v, norms) = self.direction(base)?;
        let (n, m) = v.shape();
        let mut grad_mag = vec![0.0; m];
        let mut grad_v = Matrix::zeros(n, m);
        for j in 0..m {
            let vj = v.col(j);
            let gj = g.col(j);
            let c = norms[j];
            let proj = dot(&vj, &gj);
            grad_mag[j] = proj / c;
            // ∂(g v/‖v‖)/∂v = g (I/c − v vᵀ/c³)
            let coef = self.magnitude[j];
            for i in 0..n {
                grad_v[(i, j)] = coef * (gj[i] / c - vj[i] * proj / (c * c * c));
            }
        }
        let grad_b = grad_v.matmul_t(&self.direction_a)?;
        let grad_a = self.direction_b.t_matmul(&grad_v)?;
        Ok(vec![grad_mag, grad_b.into_vec(), grad_a.into_vec()])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![&self.magnitude, self.direction_b.as_slice(), self.direction_a.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.magnitude,
            self.direction_b.as_mut_slice(),
            self.direction_a.as_mut_slice(),
        ]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::trainable("magnitude", vec_tensor(&self.magnitude)),
            NamedTensor::trainable("direction_b", self.direction_b.clone()),
            NamedTensor::trainable("direction_a", self.direction_a.clone()),
        ]
    }

    fn rank(&self) -> usize {
        self.direction_b.cols()
    }
}

/// Additive spectral parameters of a vector weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    pub a_prime: Vec<f64>,
    pub b_prime: f64,
}

/// `(w₀/‖w₀‖ + a′) · ‖w₀‖ · (1 + b′)`.
pub fn spectral_vector_output(w0: &[f64], p: &SpectralVector) -> Vec<f64> {
    let norm = norm2(w0);
    let gain = norm * (1.0 + p.b_prime);
    w0.iter().zip(&p.a_prime).map(|(w, a)| (w / norm + a) * gain).collect()
}

/// `magnitude · (w₀ + b·a)/‖w₀ + b·a‖`, with scalar `a`.
pub fn dora_output(w0: &[f64], magnitude: f64, b: &[f64], a: f64) -> Vec<f64> {
    let v: Vec<f64> = w0.iter().zip(b).map(|(w, b)| w + b * a).collect();
    let c = norm2(&v);
    v.iter().map(|x| magnitude * x / c).collect()
}

/// DoRA parameters `(w̲, b̲, a̲)` reproducing a spectral vector output.
///
/// With `d = w₀/‖w₀‖ + a′`: `b̲a̲ = ‖w₀‖·d − w₀ = ‖w₀‖·a′` (so `a̲ = 1`),
/// which makes the normalized direction `d/‖d‖`, and `w̲ = ‖w₀‖(1 + b′)‖d‖`.
/// Returns `None` when `d = 0`.
pub fn match_dora_to_spectral(w0: &[f64], p: &SpectralVector) -> Option<(f64, Vec<f64>, f64)> {
    let norm = norm2(w0);
    let d: Vec<f64> = w0.iter().zip(&p.a_prime).map(|(w, a)| w / norm + a).collect();
    let d_norm = norm2(&d);
    if d_norm == 0.0 {
        return None;
    }
    let b: Vec<f64> = p.a_prime.iter().map(|a| norm * a).collect();
    Some((norm * (1.0 + p.b_prime) * d_norm, b, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct DoRAMatchReport {
    pub samples: usize,
    pub matched: usize,
    pub skipped_degenerate: usize,
    /// Max absolute difference between the two outputs over matched samples.
    pub max_error: f64,
    /// Max of `|w̲ − ‖w₀‖(1 + b′)|` over matched samples with `a′ = 0`
    /// directions; zero when no such sample occurs.
    pub magnitude_correspondence_error: f64,
}

/// Samples spectral vector parameters and checks the constructive DoRA match.
pub fn dora_spectral_vector_match(w0: &[f64], samples: usize, seed: u64) -> Result<DoRAMatchReport> {
    let norm = norm2(w0);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Precondition("w0 must be a nonzero finite vector".into()));
    }
    let mut rng = seeded(seed);
    let mut report = DoRAMatchReport {
        samples,
        matched: 0,
        skipped_degenerate: 0,
        max_error: 0.0,
        magnitude_correspondence_error: 0.0,
    };
    for _ in 0..samples {
        let p = SpectralVector {
            a_prime: gaussian_vec(&mut rng, w0.len(), 0.5),
            b_prime: 0.5 * crate::rng::gaussian(&mut rng),
        };
        evaluate_match(w0, &p, &mut report);
    }
    // The pure-magnitude direction a′ = 0 checks w̲ ↔ ‖w₀‖(1 + b′).
    let pure = SpectralVector {
        a_prime: vec![0.0; w0.len()],
        b_prime: 0.5,
    };
    if let Some((mag, _, _)) = match_dora_to_spectral(w0, &pure) {
        report.magnitude_correspondence_error = (mag - norm * 1.5).abs();
    }
    Ok(report)
}

fn evaluate_match(w0: &[f64], p: &SpectralVector, report: &mut DoRAMatchReport) {
    match match_dora_to_spectral(w0, p) {
        Some((mag, b, a)) => {
            let lhs = dora_output(w0, mag, &b, a);
            let rhs = spectral_vector_output(w0, p);
            let err = lhs.iter().zip(&rhs).fold(0.0_f64, |e, (x, y)| e.max((x - y).abs()));
            report.max_error = report.max_error.max(err);
            report.matched += 1;
        }
        None => report.skipped_degenerate += 1,
    }
}

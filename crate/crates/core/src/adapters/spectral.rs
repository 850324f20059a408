//! Additive and rotational tuning of selected singular-vector columns.
//!
//! Both kinds keep `S` frozen. With `Ū`, `V̄` the factors after the selected
//! columns are modified, the effective weight is `Ū · diag(s) · V̄ᵀ`; it is
//! evaluated as the base weight plus the change contributed by the selected
//! block, so a zero state reproduces the base bit-for-bit.

use super::cayley::CayleyMap;
use super::{Adapter, AdapterBase, AdapterKind, NamedTensor};
use crate::error::{Error, Result};
use crate::linalg::{ColumnSelect, Matrix, SpectralDecomposition};

pub(crate) fn check_columns(base: &AdapterBase, rank: usize, columns: &ColumnSelect) -> Result<()> {
    if columns.count() != rank {
        return Err(Error::Precondition(format!(
            "column selection holds {} columns but rank is {rank}",
            columns.count()
        )));
    }
    columns.validate(base.k())
}

/// Selected columns of `u`, `v` and the matching singular values.
struct Block {
    u: Matrix,
    v: Matrix,
    s: Vec<f64>,
}

fn block(d: &SpectralDecomposition, columns: &ColumnSelect) -> Result<Block> {
    columns.validate(d.k())?;
    let idx = columns.indices();
    Ok(Block {
        u: d.u().select_cols(&idx),
        v: d.v().select_cols(&idx),
        s: idx.iter().map(|&i| d.s()[i]).collect(),
    })
}

/// Additive tuning: selected columns of `U` and `V` receive `A_U`, `A_V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralAState {
    /// `n x r`.
    pub a_u: Matrix,
    /// `m x r`.
    pub a_v: Matrix,
    pub columns: ColumnSelect,
}

impl SpectralAState {
    pub fn zeros(n: usize, m: usize, columns: ColumnSelect) -> Self {
        let r = columns.count();
        Self {
            a_u: Matrix::zeros(n, r),
            a_v: Matrix::zeros(m, r),
            columns,
        }
    }

    fn check(&self, base: &AdapterBase) -> Result<Block> {
        let (n, m) = base.shape();
        let r = self.columns.count();
        if self.a_u.shape() != (n, r) || self.a_v.shape() != (m, r) {
            return Err(Error::shape(
                "SpectralA",
                format!(
                    "a_u {:?}, a_v {:?} for base {n}x{m} with {r} selected columns",
                    self.a_u.shape(),
                    self.a_v.shape()
                ),
            ));
        }
        block(base.decomposition(), &self.columns)
    }

    /// Tuned left and right factors restricted to the selected columns.
    pub fn tuned_block(&self, d: &SpectralDecomposition) -> Result<(Matrix, Matrix)> {
        let b = block(d, &self.columns)?;
        Ok((b.u.add(&self.a_u)?, b.v.add(&self.a_v)?))
    }
}

impl Adapter for SpectralAState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::SpectralA
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        let b = self.check(base)?;
        // (U+A_U) S (V+A_V)ᵀ − U S Vᵀ = A_U S (V+A_V)ᵀ + U S A_Vᵀ
        let v_tuned = b.v.add(&self.a_v)?;
        let delta = self
            .a_u
            .scale_cols(&b.s)
            .matmul_t(&v_tuned)?
            .add(&b.u.scale_cols(&b.s).matmul_t(&self.a_v)?)?;
        base.weight().add(&delta)
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        let b = self.check(base)?;
        let u_tuned = b.u.add(&self.a_u)?;
        let v_tuned = b.v.add(&self.a_v)?;
        let grad_u = g.matmul(&v_tuned.scale_cols(&b.s))?;
        let grad_v = g.t_matmul(&u_tuned.scale_cols(&b.s))?;
        Ok(vec![grad_u.into_vec(), grad_v.into_vec()])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![self.a_u.as_slice(), self.a_v.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.a_u.as_mut_slice(), self.a_v.as_mut_slice()]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::trainable("a_u", self.a_u.clone()),
            NamedTensor::trainable("a_v", self.a_v.clone()),
        ]
    }

    fn rank(&self) -> usize {
        self.columns.count()
    }
}

/// Rotational tuning: selected columns of `U` and `V` are right-multiplied
/// by Cayley rotations of `raw_u`, `raw_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRState {
    /// `r x r` generator for the left rotation.
    pub raw_u: Matrix,
    /// `r x r` generator for the right rotation.
    pub raw_v: Matrix,
    pub columns: ColumnSelect,
}

impl SpectralRState {
    pub fn identity(columns: ColumnSelect) -> Self {
        let r = columns.count();
        Self {
            raw_u: Matrix::zeros(r, r),
            raw_v: Matrix::zeros(r, r),
            columns,
        }
    }

    pub fn rotations(&self) -> Result<(Matrix, Matrix)> {
        Ok((CayleyMap::new(&self.raw_u)?.rotation, CayleyMap::new(&self.raw_v)?.rotation))
    }

    fn check(&self, d: &SpectralDecomposition) -> Result<Block> {
        let r = self.columns.count();
        if self.raw_u.shape() != (r, r) || self.raw_v.shape() != (r, r) {
            return Err(Error::shape(
                "SpectralR",
                format!("generators {:?}, {:?} for {r} selected columns", self.raw_u.shape(), self.raw_v.shape()),
            ));
        }
        block(d, &self.columns)
    }
}

impl Adapter for SpectralRState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::SpectralR
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        let b = self.check(base.decomposition())?;
        let (ru, rv) = self.rotations()?;
        let u_rot = b.u.matmul(&ru)?;
        let v_rot = b.v.matmul(&rv)?;
        let delta = u_rot
            .scale_cols(&b.s)
            .matmul_t(&v_rot)?
            .sub(&b.u.scale_cols(&b.s).matmul_t(&b.v)?)?;
        base.weight().add(&delta)
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        let b = self.check(base.decomposition())?;
        let cu = CayleyMap::new(&self.raw_u)?;
        let cv = CayleyMap::new(&self.raw_v)?;
        let u_rot = b.u.matmul(&cu.rotation)?;
        let v_rot = b.v.matmul(&cv.rotation)?;
        // ∂L/∂(U R_U) = G (V R_V) S ; ∂L/∂R_U = Uᵀ · that.
        let grad_ru = b.u.t_matmul(&g.matmul(&v_rot.scale_cols(&b.s))?)?;
        let grad_rv = b.v.t_matmul(&g.t_matmul(&u_rot.scale_cols(&b.s))?)?;
        Ok(vec![cu.backward(&grad_ru).into_vec(), cv.backward(&grad_rv).into_vec()])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![self.raw_u.as_slice(), self.raw_v.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.raw_u.as_mut_slice(), self.raw_v.as_mut_slice()]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::trainable("raw_u", self.raw_u.clone()),
            NamedTensor::trainable("raw_v", self.raw_v.clone()),
        ]
    }

    fn rank(&self) -> usize {
        self.columns.count()
    }
}

/// Decomposition of the merged weight obtained by substituting the rotated
/// columns, with no new SVD.
///
/// The factors stay orthonormal; the result is flagged canonical only when
/// the singular values inside the rotated block are all equal (then the
/// rotated columns are again singular vectors and signs are re-fixed).
pub fn re_decompose_rotated(base: &SpectralDecomposition, state: &SpectralRState) -> Result<SpectralDecomposition> {
    let b = state.check(base)?;
    let (ru, rv) = state.rotations()?;
    let idx = state.columns.indices();
    let mut u = base.u().clone();
    let mut v = base.v().clone();
    u.assign_cols(&idx, &b.u.matmul(&ru)?);
    v.assign_cols(&idx, &b.v.matmul(&rv)?);
    if &u == base.u() && &v == base.v() {
        return Ok(base.clone());
    }
    let equal_block = b.s.windows(2).all(|w| w[0] == w[1]);
    let out = SpectralDecomposition::from_parts_unchecked(u, base.s().to_vec(), v, false);
    Ok(if equal_block { out.canonicalize() } else { out })
}

//! Baseline PEFT parameterizations: LoRA, OFT, SVDiff, VeRA, LiDB.

use rand::Rng;

use super::cayley::CayleyMap;
use super::{take_tensor, vec_tensor, Adapter, AdapterBase, AdapterKind, NamedTensor};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::gaussian_matrix;

fn check_shape(op: &'static str, name: &str, m: &Matrix, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::shape(op, format!("{name} is {:?}, expected {expected:?}", m.shape())));
    }
    Ok(())
}

/// `W + scale · a · bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRAState {
    /// `n x r`, Gaussian at init.
    pub a: Matrix,
    /// `m x r`, zero at init.
    pub b: Matrix,
    pub scale: f64,
}

impl LoRAState {
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, r: usize, scale: f64, rng: &mut R) -> Self {
        let std = if r > 0 { 1.0 / (r as f64).sqrt() } else { 0.0 };
        Self {
            a: gaussian_matrix(rng, n, r, std),
            b: Matrix::zeros(m, r),
            scale,
        }
    }

    fn check(&self, base: &AdapterBase) -> Result<()> {
        let (n, m) = base.shape();
        let r = self.a.cols();
        check_shape("LoRA", "a", &self.a, (n, r))?;
        check_shape("LoRA", "b", &self.b, (m, r))
    }
}

impl Adapter for LoRAState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::LoRA
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        self.check(base)?;
        let mut w = base.weight().clone();
        w.axpy(self.scale, &self.a.matmul_t(&self.b)?)?;
        Ok(w)
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check(base)?;
        let ga = g.matmul(&self.b)?.scale(self.scale);
        let gb = g.t_matmul(&self.a)?.scale(self.scale);
        Ok(vec![ga.into_vec(), gb.into_vec()])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![self.a.as_slice(), self.b.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.a.as_mut_slice(), self.b.as_mut_slice()]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![NamedTensor::trainable("a", self.a.clone()), NamedTensor::trainable("b", self.b.clone())]
    }

    fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// Block-diagonal orthogonal multiplier `P` applied as `P · W`.
///
/// Blocks have size `⌈n / num_blocks⌉`; when that does not divide `n` the
/// final block is shorter. A block count that this rule cannot realize for
/// `n` is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct OFTState {
    pub num_blocks: usize,
    pub shared: bool,
    /// One generator when shared, otherwise one per block sized to the block.
    pub generators: Vec<Matrix>,
}

impl OFTState {
    /// `(block_size, sizes)` for `n` rows split into `num_blocks` blocks.
    pub fn block_layout(n: usize, num_blocks: usize) -> Result<(usize, Vec<usize>)> {
        if num_blocks == 0 || num_blocks > n {
            return Err(Error::Precondition(format!("OFT cannot split {n} rows into {num_blocks} blocks")));
        }
        let size = n.div_ceil(num_blocks);
        let actual = n.div_ceil(size);
        if actual != num_blocks {
            return Err(Error::Precondition(format!(
                "OFT with {num_blocks} blocks is not achievable for n = {n}: block size {size} yields {actual} blocks"
            )));
        }
        let sizes = (0..num_blocks).map(|i| size.min(n - i * size)).collect();
        Ok((size, sizes))
    }

    pub fn identity(n: usize, num_blocks: usize, shared: bool) -> Result<Self> {
        let (size, sizes) = Self::block_layout(n, num_blocks)?;
        let generators = if shared {
            vec![Matrix::zeros(size, size)]
        } else {
            sizes.iter().map(|&s| Matrix::zeros(s, s)).collect()
        };
        Ok(Self {
            num_blocks,
            shared,
            generators,
        })
    }

    pub(crate) fn from_tensors(num_blocks: usize, shared: bool, tensors: &mut Vec<NamedTensor>) -> Result<Self> {
        let count = if shared { 1 } else { num_blocks };
        let generators = (0..count)
            .map(|i| take_tensor(tensors, &format!("block_{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_blocks,
            shared,
            generators,
        })
    }

    fn generator_for(&self, block: usize, size: usize) -> Matrix {
        if self.shared {
            self.generators[0].leading(size, size)
        } else {
            self.generators[block].clone()
        }
    }

    fn layout_for(&self, n: usize) -> Result<Vec<usize>> {
        let (size, sizes) = Self::block_layout(n, self.num_blocks)?;
        let expected = if self.shared { 1 } else { sizes.len() };
        if self.generators.len() != expected {
            return Err(Error::shape(
                "OFT",
                format!("{} generators, expected {expected}", self.generators.len()),
            ));
        }
        if self.shared {
            check_shape("OFT", "shared generator", &self.generators[0], (size, size))?;
        } else {
            for (g, &s) in self.generators.iter().zip(&sizes) {
                check_shape("OFT", "block generator", g, (s, s))?;
            }
        }
        Ok(sizes)
    }

    /// The assembled `n x n` block-diagonal orthogonal matrix.
    pub fn multiplier(&self, n: usize) -> Result<Matrix> {
        let sizes = self.layout_for(n)?;
        let mut p = Matrix::zeros(n, n);
        let mut off = 0;
        for (i, &s) in sizes.iter().enumerate() {
            let r = CayleyMap::new(&self.generator_for(i, s))?.rotation;
            for a in 0..s {
                for b in 0..s {
                    p[(off + a, off + b)] = r[(a, b)];
                }
            }
            off += s;
        }
        Ok(p)
    }
}

impl Adapter for OFTState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::OFT
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        let p = self.multiplier(base.shape().0)?;
        p.matmul(base.weight())
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        let n = base.shape().0;
        let sizes = self.layout_for(n)?;
        // ∂L/∂P = G Wᵀ, read block by block.
        let grad_p = g.matmul_t(base.weight())?;
        let mut grads: Vec<Matrix> = self.generators.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        let mut off = 0;
        for (i, &s) in sizes.iter().enumerate() {
            let map = CayleyMap::new(&self.generator_for(i, s))?;
            let gb = Matrix::from_fn(s, s, |a, b| grad_p[(off + a, off + b)]);
            let graw = map.backward(&gb);
            let target = if self.shared { &mut grads[0] } else { &mut grads[i] };
            for a in 0..s {
                for b in 0..s {
                    target[(a, b)] += graw[(a, b)];
                }
            }
            off += s;
        }
        Ok(grads.into_iter().map(Matrix::into_vec).collect())
    }

    fn params(&self) -> Vec<&[f64]> {
        self.generators.iter().map(Matrix::as_slice).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.generators.iter_mut().map(Matrix::as_mut_slice).collect()
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        self.generators
            .iter()
            .enumerate()
            .map(|(i, g)| NamedTensor::trainable(&format!("block_{i}"), g.clone()))
            .collect()
    }

    fn rank(&self) -> usize {
        self.num_blocks
    }
}

/// Tunes every singular value: `U · diag(max(s + δs, 0)) · Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SVDiffState {
    pub delta_s: Vec<f64>,
}

impl SVDiffState {
    pub fn zeros(k: usize) -> Self {
        Self { delta_s: vec![0.0; k] }
    }

    fn check(&self, base: &AdapterBase) -> Result<()> {
        if self.delta_s.len() != base.k() {
            return Err(Error::shape(
                "SVDiff",
                format!("{} shifts for {} singular values", self.delta_s.len(), base.k()),
            ));
        }
        Ok(())
    }

    /// Singular values after the clamped shift.
    pub fn shifted(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.delta_s).map(|(s, d)| (s + d).max(0.0)).collect()
    }
}

impl Adapter for SVDiffState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::SVDiff
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        self.check(base)?;
        let d = base.decomposition();
        // Direct product, so a full cancellation δs = −s gives an exact zero.
        d.u().scale_cols(&self.shifted(d.s())).matmul_t(d.v())
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check(base)?;
        let d = base.decomposition();
        let gv = g.matmul(d.v())?;
        let grad = (0..d.k())
            .map(|j| {
                if d.s()[j] + self.delta_s[j] > 0.0 {
                    dot(&d.u().col(j), &gv.col(j))
                } else {
                    0.0
                }
            })
            .collect();
        Ok(vec![grad])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![&self.delta_s]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.delta_s]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![NamedTensor::trainable("delta_s", vec_tensor(&self.delta_s))]
    }

    fn rank(&self) -> usize {
        self.delta_s.len()
    }
}

/// `W + diag(λ_a) · a · diag(λ_b) · bᵀ` with frozen Gaussian `a`, `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct VeRAState {
    /// Frozen `n x r`.
    pub a: Matrix,
    /// Frozen `m x r`.
    pub b: Matrix,
    pub lambda_a: Vec<f64>,
    /// Zero at init.
    pub lambda_b: Vec<f64>,
}

impl VeRAState {
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, r: usize, lambda_a_init: f64, rng: &mut R) -> Self {
        Self {
            a: gaussian_matrix(rng, n, r, 1.0),
            b: gaussian_matrix(rng, m, r, 1.0),
            lambda_a: vec![lambda_a_init; n],
            lambda_b: vec![0.0; r],
        }
    }

    fn check(&self, base: &AdapterBase) -> Result<()> {
        let (n, m) = base.shape();
        let r = self.a.cols();
        check_shape("VeRA", "a", &self.a, (n, r))?;
        check_shape("VeRA", "b", &self.b, (m, r))?;
        if self.lambda_a.len() != n || self.lambda_b.len() != r {
            return Err(Error::shape(
                "VeRA",
                format!("λ_a {}, λ_b {} for n = {n}, r = {r}", self.lambda_a.len(), self.lambda_b.len()),
            ));
        }
        Ok(())
    }
}

impl Adapter for VeRAState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::VeRA
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        self.check(base)?;
        let delta = self
            .a
            .scale_rows(&self.lambda_a)
            .scale_cols(&self.lambda_b)
            .matmul_t(&self.b)?;
        base.weight().add(&delta)
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check(base)?;
        // ∂L/∂λ_a[i] = Σ_j G_ij (a diag(λ_b) bᵀ)_ij
        let inner = self.a.scale_cols(&self.lambda_b).matmul_t(&self.b)?;
        let grad_a = (0..g.rows()).map(|i| dot(g.row(i), inner.row(i))).collect();
        // ∂L/∂λ_b[k] = ((diag(λ_a) a)ᵀ G b)_kk
        let left = self.a.scale_rows(&self.lambda_a);
        let gb = g.matmul(&self.b)?;
        let grad_b = (0..self.a.cols()).map(|k| dot(&left.col(k), &gb.col(k))).collect();
        Ok(vec![grad_a, grad_b])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![&self.lambda_a, &self.lambda_b]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.lambda_a, &mut self.lambda_b]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::frozen("a", self.a.clone()),
            NamedTensor::frozen("b", self.b.clone()),
            NamedTensor::trainable("lambda_a", vec_tensor(&self.lambda_a)),
            NamedTensor::trainable("lambda_b", vec_tensor(&self.lambda_b)),
        ]
    }

    fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// `W + a_aux · a · b_tᵀ · b_aux` with frozen Gaussian auxiliaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LiDBState {
    /// Frozen `n x a`.
    pub a_aux: Matrix,
    /// Frozen `b x m`.
    pub b_aux: Matrix,
    /// Trainable `a x r`, zero at init.
    pub a: Matrix,
    /// Trainable `b x r`.
    pub b_t: Matrix,
}

impl LiDBState {
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, r: usize, a_dim: usize, b_dim: usize, rng: &mut R) -> Self {
        let std = if r > 0 { 1.0 / (r as f64).sqrt() } else { 0.0 };
        Self {
            a_aux: gaussian_matrix(rng, n, a_dim, 1.0),
            b_aux: gaussian_matrix(rng, b_dim, m, 1.0),
            a: Matrix::zeros(a_dim, r),
            b_t: gaussian_matrix(rng, b_dim, r, std),
        }
    }

    fn check(&self, base: &AdapterBase) -> Result<()> {
        let (n, m) = base.shape();
        let (ad, bd, r) = (self.a_aux.cols(), self.b_aux.rows(), self.a.cols());
        check_shape("LiDB", "a_aux", &self.a_aux, (n, ad))?;
        check_shape("LiDB", "b_aux", &self.b_aux, (bd, m))?;
        check_shape("LiDB", "a", &self.a, (ad, r))?;
        check_shape("LiDB", "b_t", &self.b_t, (bd, r))
    }
}

impl Adapter for LiDBState {
    fn kind(&self) -> AdapterKind {
        AdapterKind::LiDB
    }

    fn effective_weight(&self, base: &AdapterBase) -> Result<Matrix> {
        self.check(base)?;
        let core = self.a.matmul_t(&self.b_t)?;
        let delta = self.a_aux.matmul(&core)?.matmul(&self.b_aux)?;
        base.weight().add(&delta)
    }

    fn backprop(&self, base: &AdapterBase, g: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check(base)?;
        // H = a_auxᵀ G b_auxᵀ ; ∂L/∂a = H b_t ; ∂L/∂b_t = Hᵀ a
        let h = self.a_aux.t_matmul(g)?.matmul_t(&self.b_aux)?;
        let ga = h.matmul(&self.b_t)?;
        let gb = h.t_matmul(&self.a)?;
        Ok(vec![ga.into_vec(), gb.into_vec()])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![self.a.as_slice(), self.b_t.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.a.as_mut_slice(), self.b_t.as_mut_slice()]
    }

    fn tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::frozen("a_aux", self.a_aux.clone()),
            NamedTensor::frozen("b_aux", self.b_aux.clone()),
            NamedTensor::trainable("a", self.a.clone()),
            NamedTensor::trainable("b_t", self.b_t.clone()),
        ]
    }

    fn rank(&self) -> usize {
        self.a.cols()
    }
}

//! Thin singular value decomposition.
//!
//! Golub–Kahan–Reinsch: Householder bidiagonalization followed by
//! implicit-shift QR sweeps on the bidiagonal, operating on column-major
//! work buffers. Results are sign-canonicalized so identical input bits give
//! identical output bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::qr_thin;
use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::gaussian_matrix;

/// Per-singular-value QR sweep cap.
pub const MAX_SWEEPS_PER_VALUE: usize = 75;

/// Thin SVD triple `W = U · diag(s) · Vᵀ`.
///
/// `u` is `n x k`, `v` is `m x k`, `s` non-increasing and nonnegative.
/// `k = min(n, m)` for [`svd_thin`]; truncated decompositions (randomized
/// path) carry a smaller `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
    canonical: bool,
}

impl SpectralDecomposition {
    /// Assembles a decomposition from parts, checking shapes and the
    /// ordering of `s`. Orthonormality is the caller's responsibility.
    pub fn from_parts(u: Matrix, s: Vec<f64>, v: Matrix) -> Result<Self> {
        let k = s.len();
        if u.cols() != k || v.cols() != k {
            return Err(Error::shape(
                "SpectralDecomposition",
                format!("u {}x{}, s {k}, v {}x{}", u.rows(), u.cols(), v.rows(), v.cols()),
            ));
        }
        if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Precondition("singular values must be finite and nonnegative".into()));
        }
        if s.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Precondition("singular values must be non-increasing".into()));
        }
        let canonical = is_canonical(&u);
        Ok(Self { u, s, v, canonical })
    }

    pub(crate) fn from_parts_unchecked(u: Matrix, s: Vec<f64>, v: Matrix, canonical: bool) -> Self {
        Self { u, s, v, canonical }
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// Shape `(n, m)` of the decomposed matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// Whether the sign convention holds and each column pairs with its own
    /// singular value. Rotated decompositions clear this flag.
    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn into_parts(self) -> (Matrix, Vec<f64>, Matrix) {
        (self.u, self.s, self.v)
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_cols(&self.s).mul_t_unchecked(&self.v)
    }

    /// Applies the sign convention: in every column of `u` the entry of
    /// largest magnitude (lowest row on ties) is nonnegative, with the
    /// matching column of `v` negated in tandem.
    pub fn canonicalize(mut self) -> Self {
        canonicalize_signs(&mut self.u, &mut self.v);
        self.canonical = true;
        self
    }
}

impl Matrix {
    pub(crate) fn mul_t_unchecked(&self, other: &Matrix) -> Matrix {
        self.matmul_t(other).expect("shape checked by caller")
    }
}

fn pivot_row(u: &Matrix, j: usize) -> usize {
    let mut best = 0;
    let mut best_abs = -1.0;
    for i in 0..u.rows() {
        let a = u[(i, j)].abs();
        if a > best_abs {
            best_abs = a;
            best = i;
        }
    }
    best
}

fn canonicalize_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        if u.rows() == 0 {
            break;
        }
        let p = pivot_row(u, j);
        if u[(p, j)] < 0.0 {
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.rows() {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
}

fn is_canonical(u: &Matrix) -> bool {
    (0..u.cols()).all(|j| u.rows() == 0 || u[(pivot_row(u, j), j)] >= 0.0)
}

/// Allocation accounting for the decomposition path, in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SvdStats {
    /// Sum of work buffers live at the same time, including outputs.
    pub peak_bytes: usize,
    /// Total QR sweeps over all singular values.
    pub sweeps: usize,
}

/// Canonicalized thin SVD.
pub fn svd_thin(w: &Matrix) -> Result<SpectralDecomposition> {
    svd_thin_with_stats(w).map(|(d, _)| d)
}

pub fn svd_thin_with_stats(w: &Matrix) -> Result<(SpectralDecomposition, SvdStats)> {
    if !w.is_finite() {
        return Err(Error::NonFinite {
            context: format!("svd input {}x{}", w.rows(), w.cols()),
        });
    }
    let (n, m) = w.shape();
    let k = n.min(m);
    if k == 0 {
        let d = SpectralDecomposition::from_parts_unchecked(Matrix::zeros(n, 0), Vec::new(), Matrix::zeros(m, 0), true);
        return Ok((d, SvdStats::default()));
    }
    let (mut u, s, mut v, stats) = if n >= m {
        let g = gkr(w)?;
        (g.u, g.s, g.v, g.stats)
    } else {
        let g = gkr(&w.transpose())?;
        (g.v, g.s, g.u, g.stats)
    };
    canonicalize_signs(&mut u, &mut v);
    Ok((SpectralDecomposition::from_parts_unchecked(u, s, v, true), stats))
}

/// `u · diag(s) · vᵀ`.
pub fn reconstruct(d: &SpectralDecomposition) -> Matrix {
    d.reconstruct()
}

struct Gkr {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
    stats: SvdStats,
}

#[inline]
fn rotate(buf: &mut [f64], len: usize, j: usize, jj: usize, cs: f64, sn: f64) {
    for i in 0..len {
        let x = buf[j * len + i];
        let y = buf[jj * len + i];
        buf[j * len + i] = cs * x + sn * y;
        buf[jj * len + i] = -sn * x + cs * y;
    }
}

/// Core routine for a tall matrix (`rows >= cols >= 1`).
fn gkr(input: &Matrix) -> Result<Gkr> {
    let (m, n) = input.shape();
    debug_assert!(m >= n && n >= 1);
    let nu = n;
    // Column-major copies: a[j*m + i] = A[i][j].
    let mut a = input.transpose().into_vec();
    let mut s = vec![0.0; n + 1];
    let mut e = vec![0.0; n];
    let mut work = vec![0.0; m];
    let mut u = vec![0.0; nu * m];
    let mut v = vec![0.0; n * n];
    let peak_bytes = 8 * (a.len() + s.len() + e.len() + work.len() + u.len() + v.len());

    let nct = (m - 1).min(n);
    let nrt = n.saturating_sub(2).min(m);
    for k in 0..nct.max(nrt) {
        if k < nct {
            let col = &mut a[k * m..(k + 1) * m];
            let mut norm = 0.0_f64;
            for x in &col[k..] {
                norm = norm.hypot(*x);
            }
            s[k] = norm;
            if s[k] != 0.0 {
                if col[k] < 0.0 {
                    s[k] = -s[k];
                }
                for x in &mut col[k..] {
                    *x /= s[k];
                }
                col[k] += 1.0;
            }
            s[k] = -s[k];
        }
        for j in k + 1..n {
            if k < nct && s[k] != 0.0 {
                let (head, tail) = a.split_at_mut(j * m);
                let ck = &head[k * m..(k + 1) * m];
                let cj = &mut tail[..m];
                let mut t = 0.0;
                for i in k..m {
                    t += ck[i] * cj[i];
                }
                t = -t / ck[k];
                for i in k..m {
                    cj[i] += t * ck[i];
                }
            }
            e[j] = a[j * m + k];
        }
        if k < nct {
            u[k * m + k..(k + 1) * m].copy_from_slice(&a[k * m + k..(k + 1) * m]);
        }
        if k < nrt {
            let mut norm = 0.0_f64;
            for x in &e[k + 1..] {
                norm = norm.hypot(*x);
            }
            e[k] = norm;
            if e[k] != 0.0 {
                if e[k + 1] < 0.0 {
                    e[k] = -e[k];
                }
                let ek = e[k];
                for x in &mut e[k + 1..] {
                    *x /= ek;
                }
                e[k + 1] += 1.0;
            }
            e[k] = -e[k];
            if k + 1 < m && e[k] != 0.0 {
                for x in &mut work[k + 1..] {
                    *x = 0.0;
                }
                for j in k + 1..n {
                    let cj = &a[j * m..(j + 1) * m];
                    for i in k + 1..m {
                        work[i] += e[j] * cj[i];
                    }
                }
                for j in k + 1..n {
                    let t = -e[j] / e[k + 1];
                    let cj = &mut a[j * m..(j + 1) * m];
                    for i in k + 1..m {
                        cj[i] += t * work[i];
                    }
                }
            }
            for i in k + 1..n {
                v[k * n + i] = e[i];
            }
        }
    }

    let mut p = n.min(m + 1);
    if nct < n {
        s[nct] = a[nct * m + nct];
    }
    if m < p {
        s[p - 1] = 0.0;
    }
    if nrt + 1 < p {
        e[nrt] = a[(p - 1) * m + nrt];
    }
    e[p - 1] = 0.0;

    // Accumulate U.
    for j in nct..nu {
        for i in 0..m {
            u[j * m + i] = 0.0;
        }
        u[j * m + j] = 1.0;
    }
    for k in (0..nct).rev() {
        if s[k] != 0.0 {
            for j in k + 1..nu {
                let (head, tail) = u.split_at_mut(j * m);
                let ck = &head[k * m..(k + 1) * m];
                let cj = &mut tail[..m];
                let mut t = 0.0;
                for i in k..m {
                    t += ck[i] * cj[i];
                }
                t = -t / ck[k];
                for i in k..m {
                    cj[i] += t * ck[i];
                }
            }
            let ck = &mut u[k * m..(k + 1) * m];
            for x in &mut ck[k..] {
                *x = -*x;
            }
            ck[k] += 1.0;
            for x in &mut ck[..k] {
                *x = 0.0;
            }
        } else {
            let ck = &mut u[k * m..(k + 1) * m];
            for x in ck.iter_mut() {
                *x = 0.0;
            }
            ck[k] = 1.0;
        }
    }

    // Accumulate V.
    for k in (0..n).rev() {
        if k < nrt && e[k] != 0.0 {
            for j in k + 1..n {
                let (head, tail) = v.split_at_mut(j * n);
                let ck = &head[k * n..(k + 1) * n];
                let cj = &mut tail[..n];
                let mut t = 0.0;
                for i in k + 1..n {
                    t += ck[i] * cj[i];
                }
                t = -t / ck[k + 1];
                for i in k + 1..n {
                    cj[i] += t * ck[i];
                }
            }
        }
        let ck = &mut v[k * n..(k + 1) * n];
        for x in ck.iter_mut() {
            *x = 0.0;
        }
        ck[k] = 1.0;
    }

    // Diagonalize the bidiagonal.
    let pp = p - 1;
    let eps = f64::EPSILON;
    let tiny = 2.0_f64.powi(-966);
    let mut iter = 0usize;
    let mut sweeps = 0usize;
    while p > 0 {
        // k is signed: -1 means no negligible superdiagonal was found.
        let mut k: isize = p as isize - 2;
        while k >= 0 {
            let ku = k as usize;
            if e[ku].abs() <= tiny + eps * (s[ku].abs() + s[ku + 1].abs()) {
                e[ku] = 0.0;
                break;
            }
            k -= 1;
        }
        let kase;
        if k == p as isize - 2 {
            kase = 4;
        } else {
            let mut ks: isize = p as isize - 1;
            while ks > k {
                let ksu = ks as usize;
                let t = (if ks != p as isize { e[ksu].abs() } else { 0.0 })
                    + (if ks != k + 1 { e[ksu - 1].abs() } else { 0.0 });
                if s[ksu].abs() <= tiny + eps * t {
                    s[ksu] = 0.0;
                    break;
                }
                ks -= 1;
            }
            if ks == k {
                kase = 3;
            } else if ks == p as isize - 1 {
                kase = 1;
            } else {
                kase = 2;
                k = ks;
            }
        }
        let k = (k + 1) as usize;

        match kase {
            1 => {
                let mut f = e[p - 2];
                e[p - 2] = 0.0;
                for j in (k..=p - 2).rev() {
                    let t = s[j].hypot(f);
                    let cs = s[j] / t;
                    let sn = f / t;
                    s[j] = t;
                    if j != k {
                        f = -sn * e[j - 1];
                        e[j - 1] *= cs;
                    }
                    rotate(&mut v, n, j, p - 1, cs, sn);
                }
            }
            2 => {
                let mut f = e[k - 1];
                e[k - 1] = 0.0;
                for j in k..p {
                    let t = s[j].hypot(f);
                    let cs = s[j] / t;
                    let sn = f / t;
                    s[j] = t;
                    f = -sn * e[j];
                    e[j] *= cs;
                    rotate(&mut u, m, j, k - 1, cs, sn);
                }
            }
            3 => {
                iter += 1;
                sweeps += 1;
                if iter > MAX_SWEEPS_PER_VALUE * n.max(4) {
                    return Err(Error::NoConvergence {
                        algorithm: "bidiagonal QR",
                        rows: m,
                        cols: n,
                        iterations: iter,
                    });
                }
                let scale = s[p - 1]
                    .abs()
                    .max(s[p - 2].abs())
                    .max(e[p - 2].abs())
                    .max(s[k].abs())
                    .max(e[k].abs());
                let sp = s[p - 1] / scale;
                let spm1 = s[p - 2] / scale;
                let epm1 = e[p - 2] / scale;
                let sk = s[k] / scale;
                let ek = e[k] / scale;
                let b = ((spm1 + sp) * (spm1 - sp) + epm1 * epm1) / 2.0;
                let c = (sp * epm1) * (sp * epm1);
                let mut shift = 0.0;
                if b != 0.0 || c != 0.0 {
                    shift = (b * b + c).sqrt();
                    if b < 0.0 {
                        shift = -shift;
                    }
                    shift = c / (b + shift);
                }
                let mut f = (sk + sp) * (sk - sp) + shift;
                let mut g = sk * ek;
                for j in k..p - 1 {
                    let mut t = f.hypot(g);
                    let mut cs = f / t;
                    let mut sn = g / t;
                    if j != k {
                        e[j - 1] = t;
                    }
                    f = cs * s[j] + sn * e[j];
                    e[j] = cs * e[j] - sn * s[j];
                    g = sn * s[j + 1];
                    s[j + 1] *= cs;
                    rotate(&mut v, n, j, j + 1, cs, sn);
                    t = f.hypot(g);
                    cs = f / t;
                    sn = g / t;
                    s[j] = t;
                    f = cs * e[j] + sn * s[j + 1];
                    s[j + 1] = -sn * e[j] + cs * s[j + 1];
                    g = sn * e[j + 1];
                    e[j + 1] *= cs;
                    if j < m - 1 {
                        rotate(&mut u, m, j, j + 1, cs, sn);
                    }
                }
                e[p - 2] = f;
            }
            _ => {
                let mut k = k;
                if s[k] <= 0.0 {
                    s[k] = if s[k] < 0.0 { -s[k] } else { 0.0 };
                    for x in &mut v[k * n..(k + 1) * n] {
                        *x = -*x;
                    }
                }
                while k < pp {
                    if s[k] >= s[k + 1] {
                        break;
                    }
                    s.swap(k, k + 1);
                    if k < n - 1 {
                        swap_cols(&mut v, n, k, k + 1);
                    }
                    if k < m - 1 {
                        swap_cols(&mut u, m, k, k + 1);
                    }
                    k += 1;
                }
                iter = 0;
                p -= 1;
            }
        }
    }

    s.truncate(n);
    let u = Matrix::from_fn(m, nu, |i, j| u[j * m + i]);
    let v = Matrix::from_fn(n, n, |i, j| v[j * n + i]);
    Ok(Gkr {
        u,
        s,
        v,
        stats: SvdStats { peak_bytes, sweeps },
    })
}

fn swap_cols(buf: &mut [f64], len: usize, a: usize, b: usize) {
    for i in 0..len {
        buf.swap(a * len + i, b * len + i);
    }
}

/// Options for the randomized range-finder SVD.
#[derive(Debug, Clone, Copy)]
pub struct RandomizedSvd {
    pub rank: usize,
    pub oversample: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl RandomizedSvd {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            oversample: 10,
            power_iterations: 2,
            seed,
        }
    }
}

/// Truncated SVD via a Gaussian sketch with power iterations. Returns a
/// canonicalized decomposition with `k = min(rank, n, m)` columns.
pub fn randomized_svd(w: &Matrix, opts: RandomizedSvd) -> Result<SpectralDecomposition> {
    let (n, m) = w.shape();
    let k = opts.rank.min(n).min(m);
    let l = (k + opts.oversample).min(n).min(m);
    if k == 0 {
        return Ok(SpectralDecomposition::from_parts_unchecked(
            Matrix::zeros(n, 0),
            Vec::new(),
            Matrix::zeros(m, 0),
            true,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let omega = gaussian_matrix(&mut rng, m, l, 1.0);
    let (mut q, _) = qr_thin(&w.matmul(&omega)?);
    for _ in 0..opts.power_iterations {
        let (z, _) = qr_thin(&w.t_matmul(&q)?);
        let (qq, _) = qr_thin(&w.matmul(&z)?);
        q = qq;
    }
    let b = q.t_matmul(w)?;
    let small = svd_thin(&b)?;
    let keep: Vec<usize> = (0..k).collect();
    let mut u = q.matmul(small.u())?.select_cols(&keep);
    let mut v = small.v().select_cols(&keep);
    canonicalize_signs(&mut u, &mut v);
    Ok(SpectralDecomposition::from_parts_unchecked(u, small.s()[..k].to_vec(), v, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let d = a.sub(b).unwrap().max_abs();
        assert!(d <= tol, "max diff {d:e} > {tol:e}\n{a:?}\n{b:?}");
    }

    #[test]
    fn identity_decomposes_to_identity() {
        let d = svd_thin(&Matrix::identity(3)).unwrap();
        assert_eq!(d.s(), &[1.0, 1.0, 1.0]);
        assert_close(d.u(), &Matrix::identity(3), 0.0);
        assert_close(d.v(), &Matrix::identity(3), 0.0);
    }

    #[test]
    fn diagonal_case() {
        let d = svd_thin(&Matrix::diag(&[3.0, 2.0])).unwrap();
        assert_eq!(d.s(), &[3.0, 2.0]);
        assert_close(d.u(), &Matrix::identity(2), 0.0);
        assert_close(d.v(), &Matrix::identity(2), 0.0);
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let w = Matrix::diag(&[1.0, 5.0, 3.0]);
        let d = svd_thin(&w).unwrap();
        assert_eq!(d.s(), &[5.0, 3.0, 1.0]);
        assert_close(&d.reconstruct(), &w, 1e-15);
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        for (r, c) in [(3, 7), (7, 3), (1, 5), (5, 1), (1, 1), (2, 2)] {
            let w = Matrix::from_fn(r, c, |i, j| ((i * 31 + j * 17) % 11) as f64 - 5.0);
            let d = svd_thin(&w).unwrap();
            assert_eq!(d.k(), r.min(c));
            assert_close(&d.reconstruct(), &w, 1e-12);
            assert!(d.u().t_matmul(d.u()).unwrap().sub(&Matrix::identity(d.k())).unwrap().frobenius_norm() < 1e-12);
            assert!(d.v().t_matmul(d.v()).unwrap().sub(&Matrix::identity(d.k())).unwrap().frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn zero_and_rank_deficient() {
        let d = svd_thin(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(d.s(), &[0.0, 0.0, 0.0]);
        assert!(d.u().t_matmul(d.u()).unwrap().sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-15);
        let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[1.0, 1.0, 1.0]]);
        let d = svd_thin(&w).unwrap();
        assert!(d.s()[2] < 1e-14);
        assert_close(&d.reconstruct(), &w, 1e-13);
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = Matrix::identity(2);
        w[(0, 1)] = f64::INFINITY;
        assert!(svd_thin(&w).is_err());
    }

    #[test]
    fn canonical_and_idempotent() {
        let w = Matrix::from_fn(5, 4, |i, j| (i as f64 - 2.0) * (j as f64 + 1.0).sin() + (i * j) as f64 * 0.1);
        let d = svd_thin(&w).unwrap();
        assert!(d.is_canonical());
        let again = d.clone().canonicalize();
        assert_eq!(again, d);
    }

    #[test]
    fn stats_are_reported() {
        let (_, stats) = svd_thin_with_stats(&Matrix::identity(8)).unwrap();
        assert!(stats.peak_bytes >= 8 * 64 * 3);
    }
}

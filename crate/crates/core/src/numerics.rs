//! Dense linear-algebra kernel shared by the fusion, gating and alignment code.
//!
//! Everything here is `f64`: the gradient suites compare analytic gradients
//! against central differences at 1e-4 relative error, which single precision
//! cannot resolve.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Denominator floor used by [`relative_error`] so that two tiny gradients
/// that agree in absolute terms are not reported as a large relative miss.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::validation(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::validation(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in self.row_iter().zip(y) {
            axpy(yr, r, &mut out);
        }
        out
    }

    /// Arithmetic mean of the rows.
    pub fn row_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.row_iter() {
            axpy(1.0, r, &mut mean);
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        mean
    }

    /// Copy with the row mean subtracted from every row, plus that mean.
    pub fn centered(&self) -> (Matrix, Vec<f64>) {
        let mean = self.row_mean();
        let mut out = self.clone();
        for r in 0..out.rows {
            out.row_mut(r)
                .iter_mut()
                .zip(&mean)
                .for_each(|(v, m)| *v -= m);
        }
        (out, mean)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::validation(format!(
                "shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::validation("matrix has non-finite entries"))
        }
    }
}

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::validation(format!(
                "affine layer has {} outputs but {} biases",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    /// Gaussian init with standard deviation `1/√in`.
    pub fn random<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (inp.max(1) as f64).sqrt()).unwrap();
        let weight = Matrix::new(
            out,
            inp,
            (0..out * inp).map(|_| normal.sample(rng)).collect(),
        )
        .unwrap();
        let bias = (0..out).map(|_| 0.1 * normal.sample(rng)).collect();
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        axpy(1.0, &self.bias, &mut y);
        y
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Returns `v / ‖v‖`, or a degenerate-input error when `‖v‖ ≤ NORM_EPS`.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::degenerate("cannot normalize a zero-norm vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity in `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation(format!(
            "cosine of vectors with dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if !(nu > NORM_EPS && nv > NORM_EPS) {
        return Err(Error::degenerate("cosine with a zero-norm vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax.
pub fn softmax(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::validation("softmax of an empty vector"));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("softmax input has non-finite entries"));
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = w.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
#[inline]
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Right singular structure of a matrix: singular values (descending) and the
/// matching unit right singular vectors. Only directions with a nonzero
/// singular value are returned.
#[derive(Debug, Clone)]
pub struct RightSingular {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

const JACOBI_MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-15;
/// Singular values below `RANK_RTOL · σ_max` are treated as zero.
const RANK_RTOL: f64 = 1e-12;

/// One-sided Jacobi on the rows of `m`.
///
/// Rotates pairs of rows until they are mutually orthogonal. The resulting
/// rows `w_i` satisfy `Σ w_i w_iᵀ = mᵀm`, so their norms are the singular
/// values and their directions the right singular vectors. Working on rows
/// keeps the rotation count at `K²/2` for the wide `K × D` matrices used here.
pub fn right_singular(m: &Matrix) -> Result<RightSingular> {
    m.check_finite()?;
    let k = m.rows();
    let mut w: Vec<Vec<f64>> = m.row_iter().map(|r| r.to_vec()).collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.split_at_mut(q);
                for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = w.into_iter().map(|r| (norm(&r), r)).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sigma_max = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let cutoff = sigma_max * RANK_RTOL;

    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for (s, r) in pairs {
        if s > cutoff && s > 0.0 {
            vectors.push(r.iter().map(|x| x / s).collect());
            values.push(s);
        }
    }
    Ok(RightSingular { values, vectors })
}

/// Singular values (descending, nonzero only) of `m`.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(right_singular(m)?.values)
}

/// Rank-`r` reconstruction of the row-centered matrix with the mean added
/// back. Shape is preserved; when the centered matrix has rank below `r` the
/// input is reproduced up to rounding.
pub fn svd_truncate(t: &Matrix, r: usize) -> Result<Matrix> {
    if r == 0 {
        return Err(Error::validation("truncation rank must be at least 1"));
    }
    if t.rows() == 0 {
        return Err(Error::validation("cannot truncate an empty matrix"));
    }
    t.check_finite()?;

    let (centered, mean) = t.centered();
    let basis = right_singular(&centered)?;
    let keep = basis.vectors.len().min(r);

    let mut out = Matrix::zeros(t.rows(), t.cols());
    for i in 0..t.rows() {
        let x = centered.row(i);
        let dst = out.row_mut(i);
        dst.copy_from_slice(&mean);
        for v in &basis.vectors[..keep] {
            axpy(dot(x, v), v, dst);
        }
    }
    Ok(out)
}

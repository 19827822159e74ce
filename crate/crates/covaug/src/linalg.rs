//! Dense f64 matrix kernels: products, a one-sided Jacobi SVD, the Ky Fan
//! m-norm (sum of the m largest singular values) with its subgradient, and
//! covariance estimation about an arbitrary centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data; the length must equal rows*cols.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "matrix shape {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("from_rows: no rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "from_rows: row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    /// 1 x n matrix from a single row.
    pub fn row_vector(row: &[f64]) -> Self {
        Matrix { rows: 1, cols: row.len(), data: row.to_vec() }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for j in 0..other.cols {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid(format!(
                "{}: shape {}x{} vs {}x{}",
                what, self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, f: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * f).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Thin singular value decomposition: input = u * diag(sigma) * v^T with
/// column-orthonormal u and v and sigma sorted descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

const MAX_SWEEPS: usize = 64;
const ORTHO_TOL: f64 = 1e-14;

/// Full (thin) SVD by one-sided Jacobi rotations.
///
/// Matrices with more columns than rows are handled by decomposing the
/// transpose and swapping the factors.
pub fn svd_full(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid("svd: empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("svd: input has non-finite entries"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        Ok(SvdResult { u: t.v, sigma: t.sigma, v: t.u })
    } else {
        svd_tall(a)
    }
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let m = a.rows();
    let n = a.cols();

    // Work on columns: w starts as the columns of a, v accumulates rotations.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    app += w[p][i] * w[p][i];
                    aqq += w[q][i] * w[q][i];
                    apq += w[p][i] * w[q][i];
                }
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq.abs() <= ORTHO_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[p][i];
                    let wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "svd did not converge within {} sweeps",
            MAX_SWEEPS
        )));
    }

    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|&x| x * x).sum::<f64>().sqrt()).collect();
    // Descending by singular value; equal values keep ascending column index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = Matrix::zeros(m, n);
    let mut vout = Matrix::zeros(n, n);
    let mut sigma = vec![0.0; n];
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (slot, &src) in order.iter().enumerate() {
        sigma[slot] = norms[src];
        let col = if norms[src] > 0.0 {
            w[src].iter().map(|&x| x / norms[src]).collect::<Vec<f64>>()
        } else {
            orthonormal_completion(&u_cols, m)?
        };
        for i in 0..m {
            u.set(i, slot, col[i]);
        }
        u_cols.push(col);
        for i in 0..n {
            vout.set(i, slot, v[src][i]);
        }
    }
    Ok(SvdResult { u, sigma, v: vout })
}

/// Unit vector orthogonal to everything in `existing`, chosen deterministically
/// from the standard basis. Used to fill columns for zero singular values.
fn orthonormal_completion(existing: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    for k in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[k] = 1.0;
        for col in existing {
            let dot: f64 = cand.iter().zip(col).map(|(&a, &b)| a * b).sum();
            for (c, &e) in cand.iter_mut().zip(col) {
                *c -= dot * e;
            }
        }
        let norm: f64 = cand.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            return Ok(cand);
        }
    }
    Err(Error::numerical("could not complete orthonormal basis"))
}

/// Top-m singular triplets. Requires 1 <= m <= min(rows, cols).
pub fn svd_truncated(a: &Matrix, m: usize) -> Result<SvdResult> {
    let k = a.rows().min(a.cols());
    if m == 0 || m > k {
        return Err(Error::invalid(format!(
            "svd_truncated: m = {} out of range 1..={}",
            m, k
        )));
    }
    let full = svd_full(a)?;
    let mut u = Matrix::zeros(a.rows(), m);
    let mut v = Matrix::zeros(a.cols(), m);
    for j in 0..m {
        for i in 0..a.rows() {
            u.set(i, j, full.u.get(i, j));
        }
        for i in 0..a.cols() {
            v.set(i, j, full.v.get(i, j));
        }
    }
    Ok(SvdResult { u, sigma: full.sigma[..m].to_vec(), v })
}

/// Sum of the m largest singular values.
pub fn kyfan_norm(a: &Matrix, m: usize) -> Result<f64> {
    Ok(svd_truncated(a, m)?.sigma.iter().sum())
}

/// Subgradient of the Ky Fan m-norm: U_m * V_m^T from the truncated SVD.
///
/// When the m-th and (m+1)-th singular values tie, the deterministic column
/// order of the decomposition picks which subgradient is returned.
pub fn kyfan_subgrad(a: &Matrix, m: usize) -> Result<Matrix> {
    let t = svd_truncated(a, m)?;
    t.u.matmul(&t.v.transpose())
}

/// Covariance of `samples` about `centroid` with divisor n (population form):
/// (1/n) * sum_i (x_i - c)(x_i - c)^T.
pub fn covariance(samples: &[Vec<f64>], centroid: &[f64]) -> Result<Matrix> {
    if samples.is_empty() {
        return Err(Error::invalid("covariance: no samples"));
    }
    let d = centroid.len();
    let mut cov = Matrix::zeros(d, d);
    for (idx, s) in samples.iter().enumerate() {
        if s.len() != d {
            return Err(Error::invalid(format!(
                "covariance: sample {} has dimension {}, expected {}",
                idx,
                s.len(),
                d
            )));
        }
        for i in 0..d {
            let di = s[i] - centroid[i];
            for j in 0..d {
                let v = cov.get(i, j) + di * (s[j] - centroid[j]);
                cov.set(i, j, v);
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(cov.scale(inv))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn mean_vector(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("mean_vector: no samples"));
    }
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        if s.len() != d {
            return Err(Error::invalid("mean_vector: inconsistent dimensions"));
        }
        for (m, &x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    Ok(mean)
}

/// Mean and top-2 principal directions of a point cloud, for 2-d plots of
/// higher-dimensional feature sets.
pub fn pca_top2(points: &[Vec<f64>]) -> Result<(Vec<f64>, Matrix)> {
    if points.len() < 2 {
        return Err(Error::invalid("pca_top2: need at least 2 points"));
    }
    let mean = mean_vector(points)?;
    let d = mean.len();
    if d < 2 {
        return Err(Error::invalid("pca_top2: need dimension >= 2"));
    }
    let cov = covariance(points, &mean)?;
    let t = svd_truncated(&cov, 2)?;
    Ok((mean, t.u))
}

/// Projects a point onto the top-2 principal directions returned by pca_top2.
pub fn pca_project(point: &[f64], mean: &[f64], dirs: &Matrix) -> [f64; 2] {
    let mut out = [0.0; 2];
    for j in 0..2 {
        out[j] = point
            .iter()
            .zip(mean)
            .enumerate()
            .map(|(i, (&p, &m))| (p - m) * dirs.get(i, j))
            .sum();
    }
    out
}

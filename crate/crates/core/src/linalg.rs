//! Small dense linear algebra and statistics kernel.
//!
//! Everything is `f64` and row-major. Matrices here are at most a few hundred
//! rows/columns, so the routines favour plain loops and determinism over
//! blocking or SIMD.

use std::fmt::Display;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        Ok(Self::from_rows(columns)?.transpose())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Sub-matrix made of the given columns, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (k, &j) in cols.iter().enumerate() {
                dst[k] = src[j];
            }
        }
        out
    }

    /// Sub-matrix made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ * v` without materialising the transpose.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Shape {
                op: "t_matvec",
                left: (self.cols, self.rows),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest `|a_ij - a_ji|`, with its location. Errors for non-square input.
    fn asymmetry(&self) -> Result<(usize, usize, f64)> {
        if self.rows != self.cols {
            return Err(Error::Shape {
                op: "symmetric",
                left: self.shape(),
                right: (self.cols, self.rows),
            });
        }
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let d = (self[(i, j)] - self[(j, i)]).abs();
                if d > worst.2 {
                    worst = (i, j, d);
                }
            }
        }
        Ok(worst)
    }

    /// Writes the matrix as CSV with a header row of column labels and a
    /// leading column of row labels.
    pub fn write_labeled_csv<W: Write, L: Display>(
        &self,
        mut w: W,
        row_labels: &[L],
        col_labels: &[L],
    ) -> Result<()> {
        if row_labels.len() != self.rows || col_labels.len() != self.cols {
            return Err(Error::Shape {
                op: "write_labeled_csv",
                left: self.shape(),
                right: (row_labels.len(), col_labels.len()),
            });
        }
        write!(w, "label")?;
        for c in col_labels {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for (i, r) in row_labels.iter().enumerate() {
            write!(w, "{r}")?;
            for v in self.row(i) {
                write!(w, ",{v:.12e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), dst);
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax for hot loops; `v` must be non-empty.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Cosine similarity of two vectors. Errors if either has zero norm
/// (reported as index 0 or 1).
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarity between the columns of `columns`.
///
/// The upper triangle is computed once and mirrored, and the diagonal is
/// exactly 1.
pub fn cosine_matrix(columns: &Matrix) -> Result<Matrix> {
    let cols = columns.transpose();
    cosine_matrix_of_rows(&cols)
}

/// Pairwise cosine similarity between the rows of `rows`.
pub fn cosine_matrix_of_rows(rows: &Matrix) -> Result<Matrix> {
    let n = rows.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm(rows.row(i))).collect();
    if let Some(j) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::ZeroNorm(j));
    }
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let c = (dot(rows.row(i), rows.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    Ok(out)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "pearson",
            left: (x.len(), 1),
            right: (y.len(), 1),
        });
    }
    if x.len() < 2 {
        return Err(Error::Empty("pearson"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    // Relative threshold: constant inputs leave only rounding noise behind.
    let tiny = |s: f64, m: f64| s <= (1e-24 * n) * m.abs().max(1.0).powi(2);
    if tiny(sxx, mx) {
        return Err(Error::ZeroVariance("pearson x"));
    }
    if tiny(syy, my) {
        return Err(Error::ZeroVariance("pearson y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fractional ranks `(rank - 0.5) / n` with average rank for ties, where
/// `rank` is 1-based.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end, averaged.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = (avg - 0.5) / n as f64;
        }
        start = end;
    }
    out
}

/// Replaces every entry by its fractional rank among all entries of `m`.
pub fn percentile_rank(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: fractional_ranks(&m.data),
    }
}

/// Eigen-decomposition result; eigenvectors are the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

const SYMMETRY_TOL: f64 = 1e-9;

/// Full eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order. Each eigenvector's largest
/// magnitude component is made positive so output is deterministic.
pub fn symmetric_eigen(m: &Matrix) -> Result<Eigen> {
    let (i, j, diff) = m.asymmetry()?;
    let scale = m.max_abs().max(1.0);
    if diff > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric {
            row: i,
            col: j,
            diff,
        });
    }
    let n = m.rows();
    let mut a = m.clone();
    // Symmetrise exactly so rotations keep the matrix symmetric.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = v.select_cols(&order);
    for j in 0..n {
        let col = vectors.col(j);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            let flipped: Vec<f64> = col.iter().map(|x| -x).collect();
            vectors.set_col(j, &flipped);
        }
    }
    Ok(Eigen { values, vectors })
}

/// Top-`k` eigenpairs of a symmetric matrix.
pub fn symmetric_topk_eigen(m: &Matrix, k: usize) -> Result<Eigen> {
    if k > m.rows() {
        return Err(Error::Shape {
            op: "symmetric_topk_eigen",
            left: m.shape(),
            right: (k, k),
        });
    }
    let full = symmetric_eigen(m)?;
    let idx: Vec<usize> = (0..k).collect();
    Ok(Eigen {
        values: full.values[..k].to_vec(),
        vectors: full.vectors.select_cols(&idx),
    })
}

/// Projects the columns of `vectors` (one point per column) onto their top-`k`
/// principal axes. Returns a `k × n` matrix of coordinates.
pub fn pca_project(vectors: &Matrix, k: usize) -> Result<Matrix> {
    let (dim, n) = vectors.shape();
    if n < 2 {
        return Err(Error::Empty("pca_project needs at least two points"));
    }
    // Centered points as rows: n × dim.
    let mut pts = vectors.transpose();
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        axpy(1.0 / n as f64, pts.row(i), &mut mean);
    }
    for i in 0..n {
        axpy(-1.0, &mean, pts.row_mut(i));
    }
    if k > n.min(dim) {
        return Err(Error::Shape {
            op: "pca_project",
            left: (dim, n),
            right: (k, k),
        });
    }
    let mut out = Matrix::zeros(k, n);
    if n <= dim {
        // Gram route: coordinates along axis i are sqrt(λ_i) * v_i.
        let gram = matmul(&pts, &pts.transpose())?;
        let eig = symmetric_topk_eigen(&gram, k)?;
        for c in 0..k {
            let s = eig.values[c].max(0.0).sqrt();
            for j in 0..n {
                out[(c, j)] = s * eig.vectors[(j, c)];
            }
        }
    } else {
        let cov = matmul(&pts.transpose(), &pts)?;
        let eig = symmetric_topk_eigen(&cov, k)?;
        for c in 0..k {
            let axis = eig.vectors.col(c);
            for j in 0..n {
                out[(c, j)] = dot(pts.row(j), &axis);
            }
        }
    }
    Ok(out)
}

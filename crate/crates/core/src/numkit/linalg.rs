use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::matrix::RowMatrix;
use super::rng::RngState;
use crate::error::{Error, Result};

/// Retries after the first factorization attempt.
pub const MAX_JITTER_RETRIES: usize = 3;
/// First escalated jitter, relative to the mean diagonal entry.
pub const JITTER_BASE: f64 = 1e-10;

/// `a · b` through a blocked GEMM. Deterministic for fixed shapes.
pub fn gemm(a: &RowMatrix, b: &RowMatrix) -> Result<RowMatrix> {
    if a.ncols() != b.nrows() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    // A row-major buffer read as column-major is the transpose, so
    // (a·b)ᵀ = bᵀ·aᵀ lands directly in row-major order.
    let at = DMatrix::from_column_slice(a.ncols(), a.nrows(), a.as_slice());
    let bt = DMatrix::from_column_slice(b.ncols(), b.nrows(), b.as_slice());
    let ct = bt * at;
    RowMatrix::from_vec(a.nrows(), b.ncols(), ct.as_slice().to_vec())
}

/// Column mean and sample covariance (denominator n−1) of the rows of `data`.
pub fn covariance_of(data: &RowMatrix) -> Result<(Vec<f64>, RowMatrix)> {
    let n = data.nrows();
    let k = data.ncols();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let mut mean = vec![0.0; k];
    for r in data.rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = DMatrix::<f64>::from_row_slice(n, k, data.as_slice());
    for mut row in centered.row_iter_mut() {
        for (x, m) in row.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let scatter = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let mut cov = RowMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            // symmetrize exactly
            let v = 0.5 * (scatter[(i, j)] + scatter[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

/// A lower-triangular Cholesky factor together with the jitter that was
/// actually added to the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub lower: RowMatrix,
    pub jitter: f64,
}

fn try_cholesky(a: &RowMatrix, jitter: f64) -> Option<RowMatrix> {
    let k = a.nrows();
    let mut l = RowMatrix::zeros(k, k);
    for j in 0..k {
        let mut diag = a[(j, j)] + jitter;
        for p in 0..j {
            diag -= l[(j, p)] * l[(j, p)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..k {
            let mut s = a[(i, j)];
            let (ri, rj) = (i * k, j * k);
            let ld = l.as_slice();
            for p in 0..j {
                s -= ld[ri + p] * ld[rj + p];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factorization of `cov + jitter·I`, escalating the jitter when the
/// matrix is not numerically positive definite: `jitter`, then
/// `jitter + 1e-10·tr/k`, ×10 per retry, at most three retries.
pub fn cholesky(cov: &RowMatrix, jitter: f64) -> Result<CholeskyFactor> {
    let k = cov.nrows();
    if k != cov.ncols() || k == 0 {
        return Err(Error::Shape(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if !(jitter >= 0.0) {
        return Err(Error::Config(format!("jitter must be >= 0, got {jitter}")));
    }
    for i in 0..k {
        for j in 0..i {
            let (a, b) = (cov[(i, j)], cov[(j, i)]);
            if (a - b).abs() > 1e-12 * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
                return Err(Error::Domain(format!("matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    let trace: f64 = (0..k).map(|i| cov[(i, i)]).sum();
    let mut scale = JITTER_BASE * (trace / k as f64).abs();
    let mut current = jitter;
    for attempt in 0..=MAX_JITTER_RETRIES {
        if let Some(lower) = try_cholesky(cov, current) {
            return Ok(CholeskyFactor {
                lower,
                jitter: current,
            });
        }
        if attempt == MAX_JITTER_RETRIES {
            break;
        }
        current = jitter + scale;
        scale *= 10.0;
    }
    Err(Error::Factorization { jitter: current })
}

/// Multivariate normal with mean and lower-triangular covariance factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    mean: Vec<f64>,
    chol: RowMatrix,
}

impl GaussianModel {
    /// Builds a model from an explicit factor. The factor must be lower
    /// triangular with a positive diagonal, or identically zero (a point mass).
    pub fn new(mean: Vec<f64>, chol: RowMatrix) -> Result<Self> {
        let k = mean.len();
        if chol.nrows() != k || chol.ncols() != k {
            return Err(Error::Shape(format!(
                "mean of length {k} with {}x{} factor",
                chol.nrows(),
                chol.ncols()
            )));
        }
        let degenerate = chol.as_slice().iter().all(|&x| x == 0.0);
        for i in 0..k {
            if !degenerate && !(chol[(i, i)] > 0.0) {
                return Err(Error::Domain(format!("factor diagonal entry {i} is not positive")));
            }
            for j in i + 1..k {
                if chol[(i, j)] != 0.0 {
                    return Err(Error::Domain("factor is not lower triangular".into()));
                }
            }
        }
        Ok(GaussianModel { mean, chol })
    }

    /// Fits a factor to `cov`; an all-zero covariance yields a point mass.
    pub fn from_covariance(mean: Vec<f64>, cov: &RowMatrix, jitter: f64) -> Result<Self> {
        if cov.as_slice().iter().all(|&x| x == 0.0) && cov.nrows() == mean.len() {
            let k = mean.len();
            return GaussianModel::new(mean, RowMatrix::zeros(k, k));
        }
        let f = cholesky(cov, jitter)?;
        GaussianModel::new(mean, f.lower)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn chol(&self) -> &RowMatrix {
        &self.chol
    }

    /// `chol · cholᵀ`.
    pub fn covariance(&self) -> RowMatrix {
        self.chol.matmul(&self.chol.transpose()).expect("square factor")
    }
}

/// Rows generated per independent RNG stream in [`mvn_sample`].
pub const MVN_CHUNK: usize = 256;

/// `count` draws of `mean + chol·z`, z standard normal.
///
/// Chunk `c` of [`MVN_CHUNK`] rows uses stream `rng.derive(c)`, so the output
/// is identical for any number of worker threads.
pub fn mvn_sample(model: &GaussianModel, count: usize, rng: RngState) -> Result<RowMatrix> {
    if count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let k = model.dim();
    let mut out = RowMatrix::zeros(count, k);
    out.as_mut_slice()
        .par_chunks_mut(MVN_CHUNK * k)
        .enumerate()
        .for_each(|(c, chunk)| {
            let mut g = rng.derive(c as u64).rng();
            let mut z = vec![0.0; k];
            for row in chunk.chunks_exact_mut(k) {
                for zi in &mut z {
                    *zi = StandardNormal.sample(&mut g);
                }
                for (i, out_i) in row.iter_mut().enumerate() {
                    let l = model.chol.row(i);
                    let mut s = 0.0;
                    for p in 0..=i {
                        s += l[p] * z[p];
                    }
                    *out_i = model.mean[i] + s;
                }
            }
        });
    Ok(out)
}

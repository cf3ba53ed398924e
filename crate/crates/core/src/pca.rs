//! PCA model and the latent Gaussian used to sample new feature vectors.
//!
//! Feature vectors are projected onto the principal axes of a corpus, a
//! Gaussian is fitted to the projections, and fresh latent draws are mapped
//! back to feature space.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numkit::linalg::gemm;
use crate::numkit::{covariance_of, mvn_sample, GaussianModel, RngState, RowMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PcaOptions {
    /// Scale latent coordinates to unit variance.
    pub whiten: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    components: RowMatrix,
    explained_variance: Vec<f64>,
    whiten: bool,
}

impl PcaModel {
    /// Reassembles a model from stored parts, validating shapes.
    pub fn from_parts(
        mean: Vec<f64>,
        components: RowMatrix,
        explained_variance: Vec<f64>,
        whiten: bool,
    ) -> Result<Self> {
        if components.ncols() != mean.len() || components.nrows() != explained_variance.len() {
            return Err(Error::Shape(format!(
                "pca parts disagree: mean {}, components {}x{}, variance {}",
                mean.len(),
                components.nrows(),
                components.ncols(),
                explained_variance.len()
            )));
        }
        if components.nrows() == 0 {
            return Err(Error::Shape("pca model needs at least one component".into()));
        }
        if explained_variance.windows(2).any(|w| w[1] > w[0]) || explained_variance.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("explained variance must be non-negative and non-increasing".into()));
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            whiten,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &RowMatrix {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    fn latent_scale(&self, i: usize) -> f64 {
        if self.whiten {
            let s = self.explained_variance[i].sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        } else {
            1.0
        }
    }

    /// `components · (v − mean)`.
    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector of length {} for pca of dimension {}",
                v.len(),
                self.dim()
            )));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let mut z = self.components.matvec(&centered)?;
        for (i, zi) in z.iter_mut().enumerate() {
            *zi /= self.latent_scale(i);
        }
        Ok(z)
    }

    /// `mean + componentsᵀ · z`.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::Shape(format!(
                "latent vector of length {} for pca with k = {}",
                z.len(),
                self.k()
            )));
        }
        let scaled: Vec<f64> = z.iter().enumerate().map(|(i, x)| x * self.latent_scale(i)).collect();
        let mut v = self.components.tr_matvec(&scaled)?;
        for (x, m) in v.iter_mut().zip(&self.mean) {
            *x += m;
        }
        Ok(v)
    }

    /// Row-wise [`PcaModel::transform`].
    pub fn transform_rows(&self, data: &RowMatrix) -> Result<RowMatrix> {
        if data.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "data with {} columns for pca of dimension {}",
                data.ncols(),
                self.dim()
            )));
        }
        let mut centered = data.clone();
        for r in 0..centered.nrows() {
            for (x, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *x -= m;
            }
        }
        let mut z = gemm(&centered, &self.components.transpose())?;
        if self.whiten {
            let scales: Vec<f64> = (0..self.k()).map(|i| self.latent_scale(i)).collect();
            for r in 0..z.nrows() {
                for (x, s) in z.row_mut(r).iter_mut().zip(&scales) {
                    *x /= s;
                }
            }
        }
        Ok(z)
    }

    /// Row-wise [`PcaModel::inverse`].
    pub fn inverse_rows(&self, latent: &RowMatrix) -> Result<RowMatrix> {
        if latent.ncols() != self.k() {
            return Err(Error::Shape(format!(
                "latent rows with {} columns for pca with k = {}",
                latent.ncols(),
                self.k()
            )));
        }
        let mut z = latent.clone();
        if self.whiten {
            let scales: Vec<f64> = (0..self.k()).map(|i| self.latent_scale(i)).collect();
            for r in 0..z.nrows() {
                for (x, s) in z.row_mut(r).iter_mut().zip(&scales) {
                    *x *= s;
                }
            }
        }
        let mut out = gemm(&z, &self.components)?;
        for r in 0..out.nrows() {
            for (x, m) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *x += m;
            }
        }
        Ok(out)
    }
}

/// Fits the top-`k` principal axes of `data` by SVD of the centered matrix.
///
/// Tall inputs are first reduced with a QR factorization; the right singular
/// vectors of `R` equal those of the centered data. Each component is signed
/// so that its largest-magnitude entry is positive.
pub fn pca_fit(data: &RowMatrix, k: usize, options: PcaOptions) -> Result<PcaModel> {
    let n = data.nrows();
    let d = data.ncols();
    if n < 2 {
        return Err(Error::InsufficientData(format!("pca needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::Config(format!(
            "k = {k} outside [1, {}] for {n} rows of dimension {d}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for r in data.rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = DMatrix::<f64>::from_row_slice(n, d, data.as_slice());
    for mut row in centered.row_iter_mut() {
        for (x, m) in row.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let reduced = if n > d { centered.qr().r() } else { centered };
    let svd = reduced.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
            .then(a.cmp(&b))
    });
    let s_max = svd.singular_values[order[0]];
    let tol = s_max * (n.max(d) as f64) * f64::EPSILON;
    let rank = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    if s_max == 0.0 || k > rank {
        return Err(Error::Rank {
            requested: k,
            achievable: rank,
        });
    }
    let mut components = RowMatrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (out_row, &src) in order.iter().take(k).enumerate() {
        let row = components.row_mut(out_row);
        for (j, x) in row.iter_mut().enumerate() {
            *x = v_t[(src, j)];
        }
        let mut pivot = 0;
        for j in 1..d {
            if row[j].abs() > row[pivot].abs() {
                pivot = j;
            }
        }
        if row[pivot] < 0.0 {
            for x in row.iter_mut() {
                *x = -*x;
            }
        }
        let s = svd.singular_values[src];
        explained_variance.push(s * s / (n as f64 - 1.0));
    }
    PcaModel::from_parts(mean, components, explained_variance, options.whiten)
}

/// Gaussian over the latent coordinates of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub gaussian: GaussianModel,
    pub source_count: usize,
}

/// Fits a Gaussian to the latent coordinates of every row of `data`.
pub fn latent_gaussian_fit(model: &PcaModel, data: &RowMatrix) -> Result<LatentGaussian> {
    if data.nrows() < 2 {
        return Err(Error::InsufficientData(format!(
            "latent gaussian needs at least 2 rows, got {}",
            data.nrows()
        )));
    }
    let latent = model.transform_rows(data)?;
    let (mean, cov) = covariance_of(&latent)?;
    Ok(LatentGaussian {
        gaussian: GaussianModel::from_covariance(mean, &cov, 0.0)?,
        source_count: data.nrows(),
    })
}

/// Draws `count` latent vectors and maps them back to feature space.
pub fn sample_feature_vectors(
    model: &PcaModel,
    latent: &LatentGaussian,
    count: usize,
    rng: RngState,
) -> Result<RowMatrix> {
    if latent.gaussian.dim() != model.k() {
        return Err(Error::Shape(format!(
            "latent gaussian of dimension {} for pca with k = {}",
            latent.gaussian.dim(),
            model.k()
        )));
    }
    let z = mvn_sample(&latent.gaussian, count, rng)?;
    model.inverse_rows(&z)
}

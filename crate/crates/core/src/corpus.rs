//! Synthetic stand-in for a corpus of face-recognition features.
//!
//! Rows are `μ + R·diag(√λ)·z` with a power-law spectrum `λ_i ∝ (i+1)^-decay`,
//! a random rotation `R` and a mean `μ` carrying a fixed share of the energy.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::linalg::gemm;
use crate::numkit::{RngState, RowMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub count: usize,
    pub dim: usize,
    pub decay: f64,
    /// `‖μ‖² / E‖x‖²`.
    pub mean_share: f64,
    /// Root-mean-square row norm.
    pub scale: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            count: 8192,
            dim: 512,
            decay: 0.45,
            mean_share: 0.02,
            scale: 20.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || self.dim == 0 {
            return Err(Error::Config(format!(
                "synthetic corpus needs count >= 2 and dim >= 1, got {}x{}",
                self.count, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.mean_share) || !(self.scale > 0.0) || !(self.decay >= 0.0) {
            return Err(Error::Config("corpus needs 0 <= mean_share < 1, scale > 0, decay >= 0".into()));
        }
        Ok(())
    }

    /// Per-direction variances, summing to the non-mean energy.
    pub fn spectrum(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.dim).map(|i| ((i + 1) as f64).powf(-self.decay)).collect();
        let total: f64 = raw.iter().sum();
        let energy = self.scale * self.scale * (1.0 - self.mean_share);
        raw.into_iter().map(|x| x * energy / total).collect()
    }
}

/// Rows chunk `c` of 256 draws from stream `rng.derive(c + 2)`; streams 0 and
/// 1 seed the rotation and the mean.
pub fn synthetic_corpus(spec: &CorpusSpec, rng: RngState) -> Result<RowMatrix> {
    spec.validate()?;
    let d = spec.dim;
    let mut g = rng.derive(0).rng();
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut g));
    let q = a.qr().q();
    let sd: Vec<f64> = spec.spectrum().into_iter().map(f64::sqrt).collect();
    // rows of `basis` are √λ_j·r_jᵀ, so z·basis has covariance R·Λ·Rᵀ
    let mut basis = RowMatrix::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            basis[(j, i)] = sd[j] * q[(i, j)];
        }
    }
    let mut g = rng.derive(1).rng();
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut g)).collect();
    let dn = crate::numkit::norm(&dir);
    let mean_norm = spec.scale * spec.mean_share.sqrt();
    let mean: Vec<f64> = dir.iter().map(|x| x / dn * mean_norm).collect();

    const CHUNK: usize = 256;
    let chunks: Vec<RowMatrix> = (0..spec.count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK.min(spec.count - c * CHUNK);
            let mut g = rng.derive(c as u64 + 2).rng();
            let z = RowMatrix::from_vec(rows, d, (0..rows * d).map(|_| StandardNormal.sample(&mut g)).collect())?;
            let mut x = gemm(&z, &basis)?;
            for r in 0..rows {
                x.row_mut(r).iter_mut().zip(&mean).for_each(|(v, m)| *v += m);
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(spec.count * d);
    for c in chunks {
        data.extend(c.into_vec());
    }
    RowMatrix::from_vec(spec.count, d, data)
}

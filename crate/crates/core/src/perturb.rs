//! Identity-preserving perturbation of identity vectors, plus the
//! interpolation and dimension-sweep probes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cosine_similarity, norm, RngState, RowMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub sigma: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    pub mixture: Vec<MixtureComponent>,
    pub images_per_id: usize,
    pub s_min: f64,
    pub max_resamples: usize,
    pub shrink_factor: f64,
    /// Geometric shrink steps before giving up; the floor is
    /// `shrink_factor^max_shrinks`.
    pub max_shrinks: usize,
    /// Treat `sigma` as the noise standard deviation instead of its variance.
    pub sigma_is_std: bool,
    /// Perturb the unit-normalized identity vector instead of the raw one.
    pub normalize_input: bool,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            mixture: vec![
                MixtureComponent { sigma: 0.3, fraction: 0.4 },
                MixtureComponent { sigma: 0.5, fraction: 0.4 },
                MixtureComponent { sigma: 0.7, fraction: 0.2 },
            ],
            images_per_id: 50,
            s_min: 0.5,
            max_resamples: 16,
            shrink_factor: 0.5,
            max_shrinks: 20,
            sigma_is_std: false,
            normalize_input: false,
        }
    }
}

impl PerturbSpec {
    /// A spec using only the given `(sigma, fraction)` pairs, other fields default.
    pub fn with_mixture(pairs: &[(f64, f64)]) -> Self {
        PerturbSpec {
            mixture: pairs
                .iter()
                .map(|&(sigma, fraction)| MixtureComponent { sigma, fraction })
                .collect(),
            ..PerturbSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixture.is_empty() {
            return Err(Error::Config("perturbation mixture is empty".into()));
        }
        let total: f64 = self.mixture.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture fractions sum to {total}, not 1")));
        }
        if self.mixture.iter().any(|c| !(c.sigma >= 0.0) || !(c.fraction >= 0.0)) {
            return Err(Error::Config("mixture sigmas and fractions must be >= 0".into()));
        }
        // s_min = 1 is accepted so that the unreachable case surfaces as a
        // constraint error rather than a config error.
        if !(0.0..=1.0).contains(&self.s_min) {
            return Err(Error::Config(format!("s_min must lie in [0, 1], got {}", self.s_min)));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(Error::Config(format!(
                "shrink factor must lie in (0, 1), got {}",
                self.shrink_factor
            )));
        }
        if self.images_per_id == 0 {
            return Err(Error::Config("images per identity must be >= 1".into()));
        }
        Ok(())
    }

    /// Variants per mixture component: `round(fraction·m)` (halves up), with
    /// the rounding remainder given to the largest-fraction component.
    pub fn counts(&self) -> Vec<usize> {
        let m = self.images_per_id as i64;
        let mut counts: Vec<i64> = self
            .mixture
            .iter()
            .map(|c| (c.fraction * m as f64 + 0.5).floor() as i64)
            .collect();
        let largest = self
            .mixture
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| if c.fraction > self.mixture[best].fraction { i } else { best });
        let remainder = m - counts.iter().sum::<i64>();
        counts[largest] += remainder;
        // a negative remainder larger than the biggest bucket spills over in order
        let mut deficit = -counts[largest].min(0);
        counts[largest] = counts[largest].max(0);
        for c in counts.iter_mut() {
            let take = deficit.min(*c);
            *c -= take;
            deficit -= take;
        }
        counts.into_iter().map(|c| c as usize).collect()
    }

    fn noise_std(&self, sigma: f64) -> f64 {
        if self.sigma_is_std {
            sigma
        } else {
            sigma.sqrt()
        }
    }
}

/// Variants of one identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSet {
    pub id_vector: Vec<f64>,
    pub variants: RowMatrix,
    pub sigmas: Vec<f64>,
    pub similarities: Vec<f64>,
}

/// Closed-form approximation of the mean cosine between `v` and `v + ε`,
/// ε with i.i.d. entries of variance `noise_variance`: ‖v‖ / √(‖v‖² + d·s²).
pub fn expected_cosine(v_norm: f64, dim: usize, noise_variance: f64) -> f64 {
    v_norm / (v_norm * v_norm + dim as f64 * noise_variance).sqrt()
}

/// Pulls `v_pert` toward `v_id` until their cosine similarity reaches
/// `s_min`: returns `v_id + γ^i (v_pert − v_id)` for the smallest `i` that
/// satisfies the constraint. A non-positive `s_min` imposes no constraint.
pub fn enforce_min_similarity(
    v_id: &[f64],
    v_pert: &[f64],
    s_min: f64,
    shrink_factor: f64,
    max_shrinks: usize,
) -> Result<Vec<f64>> {
    if v_id.len() != v_pert.len() {
        return Err(Error::Shape(format!(
            "identity of length {} with perturbed vector of length {}",
            v_id.len(),
            v_pert.len()
        )));
    }
    if s_min <= 0.0 {
        return Ok(v_pert.to_vec());
    }
    let mut best = cosine_similarity(v_pert, v_id)?;
    if best >= s_min {
        return Ok(v_pert.to_vec());
    }
    let mut gamma = 1.0;
    for _ in 0..max_shrinks {
        gamma *= shrink_factor;
        let cand: Vec<f64> = v_id.iter().zip(v_pert).map(|(a, b)| a + gamma * (b - a)).collect();
        let s = cosine_similarity(&cand, v_id)?;
        if s >= s_min {
            return Ok(cand);
        }
        best = best.max(s);
    }
    Err(Error::Constraint { best, s_min })
}

/// Draws `images_per_id` variants `v + ε`, grouped by mixture component in
/// spec order. Every variant satisfies the minimum-similarity constraint.
pub fn perturb_identity(v_id: &[f64], spec: &PerturbSpec, rng: RngState) -> Result<PerturbedSet> {
    spec.validate()?;
    let v_norm = norm(v_id);
    if v_norm == 0.0 {
        return Err(Error::Domain("cannot perturb the zero vector".into()));
    }
    let base: Vec<f64> = if spec.normalize_input {
        v_id.iter().map(|x| x / v_norm).collect()
    } else {
        v_id.to_vec()
    };
    let d = base.len();
    let mut g = rng.rng();
    let mut variants = RowMatrix::with_cols(d);
    let mut sigmas = Vec::with_capacity(spec.images_per_id);
    let mut similarities = Vec::with_capacity(spec.images_per_id);
    let mut draw = vec![0.0; d];
    for (component, count) in spec.mixture.iter().zip(spec.counts()) {
        let std = spec.noise_std(component.sigma);
        for _ in 0..count {
            let mut accepted = None;
            for _ in 0..=spec.max_resamples {
                fill_noisy(&mut draw, &base, std, &mut g);
                let s = cosine_similarity(&draw, &base)?;
                if s >= spec.s_min {
                    accepted = Some((draw.clone(), s));
                    break;
                }
            }
            let (v, s) = match accepted {
                Some(hit) => hit,
                None => {
                    let v = enforce_min_similarity(&base, &draw, spec.s_min, spec.shrink_factor, spec.max_shrinks)?;
                    let s = cosine_similarity(&v, &base)?;
                    (v, s)
                }
            };
            variants.push_row(&v)?;
            sigmas.push(component.sigma);
            similarities.push(s);
        }
    }
    Ok(PerturbedSet {
        id_vector: base,
        variants,
        sigmas,
        similarities,
    })
}

fn fill_noisy<R: Rng>(out: &mut [f64], base: &[f64], std: f64, g: &mut R) {
    for (o, b) in out.iter_mut().zip(base) {
        let z: f64 = StandardNormal.sample(g);
        *o = b + std * z;
    }
}

/// Perturbs every row of `ids`; identity `i` uses stream `rng.derive(i)`.
pub fn perturb_all(ids: &RowMatrix, spec: &PerturbSpec, rng: RngState) -> Result<Vec<PerturbedSet>> {
    (0..ids.nrows())
        .into_par_iter()
        .map(|i| perturb_identity(ids.row(i), spec, rng.derive(i as u64)))
        .collect()
}

/// `steps` points on the segment from `a` to `b`, endpoints exact.
pub fn interpolate_features(a: &[f64], b: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("endpoints of length {} and {}", a.len(), b.len())));
    }
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let last = steps - 1;
    Ok((0..steps)
        .map(|i| {
            if i == 0 {
                a.to_vec()
            } else if i == last {
                b.to_vec()
            } else {
                let t = i as f64 / last as f64;
                a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
            }
        })
        .collect())
}

/// One copy of `v` per value, with every coordinate in `dims` overwritten.
pub fn sweep_dimensions(v: &[f64], dims: std::ops::Range<usize>, values: &[f64]) -> Result<Vec<Vec<f64>>> {
    if dims.end > v.len() || dims.start > dims.end {
        return Err(Error::Index {
            index: dims.end.max(dims.start),
            dim: v.len(),
        });
    }
    Ok(values
        .iter()
        .map(|&value| {
            let mut out = v.to_vec();
            out[dims.clone()].iter_mut().for_each(|x| *x = value);
            out
        })
        .collect())
}

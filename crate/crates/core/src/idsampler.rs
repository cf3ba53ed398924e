//! Rejection sampling of well-separated identity vectors.
//!
//! Candidates arrive in a fixed order and are admitted greedily: a candidate
//! joins the pool iff its cosine similarity with every vector already in the
//! pool is at most `tau`. Candidate batches are scanned against the pool in
//! parallel, but admission itself is strictly sequential, so the pool depends
//! only on the seed and never on the worker count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::kernel::{batch_max_similarity, cosine_similarity, dot, NormedRows, DEFAULT_ROW_BLOCK};
use crate::numkit::{norm, RngState, RowMatrix};
use crate::pca::{sample_feature_vectors, LatentGaussian, PcaModel};

/// Candidates scanned against the pool per parallel pass. Candidates inside
/// one pass are then checked against each other one pair at a time.
const SCAN_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub target_count: usize,
    pub tau: f64,
    pub candidate_batch: usize,
    pub max_candidates: usize,
    pub seed: u64,
    /// Rescale sampled vectors to unit norm before admission.
    #[serde(default)]
    pub normalize: bool,
}

impl SamplerConfig {
    pub fn new(target_count: usize, seed: u64) -> Self {
        SamplerConfig {
            target_count,
            tau: 0.3,
            candidate_batch: 4096,
            max_candidates: target_count.saturating_mul(4).max(1024),
            seed,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // tau = 0 is accepted: it demands pairwise non-positive similarity,
        // which is satisfiable for small pools and exercises exhaustion.
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        self.validate_counts()
    }

    fn validate_counts(&self) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::Config("target count must be >= 1".into()));
        }
        if self.max_candidates < self.target_count {
            return Err(Error::Config(format!(
                "max_candidates {} is below target count {}",
                self.max_candidates, self.target_count
            )));
        }
        if self.candidate_batch == 0 {
            return Err(Error::Config("candidate batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Accepted identity vectors in admission order, with cached norms.
#[derive(Clone, PartialEq)]
pub struct IdentityPool {
    vectors: RowMatrix,
    norms: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

impl IdentityPool {
    pub fn new(dim: usize) -> Self {
        IdentityPool {
            vectors: RowMatrix::with_cols(dim),
            norms: Vec::new(),
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn vectors(&self) -> &RowMatrix {
        &self.vectors
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn into_vectors(self) -> RowMatrix {
        self.vectors
    }

    /// rejected / (accepted + rejected); 0 before any candidate arrives.
    pub fn rejection_rate(&self) -> f64 {
        let total = self.accepted + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }

    /// Read-only view of the first `len` rows, for scans running alongside
    /// admission.
    pub fn view(&self) -> NormedRows<'_> {
        NormedRows::new(self.vectors.as_slice(), &self.norms, self.dim())
    }

    fn push_unchecked(&mut self, row: &[f64], row_norm: f64) {
        self.vectors.push_row(row).expect("row width checked by caller");
        self.norms.push(row_norm);
        self.accepted += 1;
    }

    /// Admits `candidates` in order, stopping once the pool holds `cap`
    /// vectors. Returns one verdict per candidate considered.
    fn admit_rows(&mut self, candidates: &RowMatrix, tau: f64, cap: usize) -> Result<Vec<bool>> {
        if candidates.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "candidates of dimension {} for pool of dimension {}",
                candidates.ncols(),
                self.dim()
            )));
        }
        let d = self.dim();
        let mut verdicts = Vec::with_capacity(candidates.nrows());
        let mut start = 0;
        while start < candidates.nrows() && self.len() < cap {
            let end = (start + SCAN_BLOCK).min(candidates.nrows());
            let block = &candidates.as_slice()[start * d..end * d];
            let block_norms: Vec<f64> = block.chunks_exact(d).map(norm).collect();
            if let Some(z) = block_norms.iter().position(|&x| x == 0.0) {
                return Err(Error::Domain(format!("candidate {} is the zero vector", start + z)));
            }
            let prefix = self.len();
            let against_pool = batch_max_similarity(
                &NormedRows::new(block, &block_norms, d),
                &self.view(),
                prefix,
                DEFAULT_ROW_BLOCK,
            );
            for (j, best) in against_pool.into_iter().enumerate() {
                if self.len() >= cap {
                    break;
                }
                let row = &block[j * d..(j + 1) * d];
                let ok = best.similarity <= tau && self.fits_recent(row, block_norms[j], prefix, tau);
                if ok {
                    self.push_unchecked(row, block_norms[j]);
                } else {
                    self.rejected += 1;
                }
                verdicts.push(ok);
            }
            start = end;
        }
        Ok(verdicts)
    }

    /// Checks `row` against pool rows admitted since `from`.
    fn fits_recent(&self, row: &[f64], row_norm: f64, from: usize, tau: f64) -> bool {
        (from..self.len()).all(|i| {
            let s = (dot(row, self.vectors.row(i)) / (row_norm * self.norms[i])).clamp(-1.0, 1.0);
            s <= tau
        })
    }
}

impl std::fmt::Debug for IdentityPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityPool")
            .field("len", &self.len())
            .field("dim", &self.dim())
            .field("accepted", &self.accepted)
            .field("rejected", &self.rejected)
            .finish()
    }
}

/// Admits `candidate` iff its maximum similarity to the pool is at most `tau`.
pub fn admit(pool: &mut IdentityPool, candidate: &[f64], tau: f64) -> Result<bool> {
    if candidate.len() != pool.dim() {
        return Err(Error::Shape(format!(
            "candidate of dimension {} for pool of dimension {}",
            candidate.len(),
            pool.dim()
        )));
    }
    let m = RowMatrix::from_vec(1, candidate.len(), candidate.to_vec())?;
    Ok(pool.admit_rows(&m, tau, usize::MAX)?[0])
}

/// Statistics written next to a sampled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    pub tau: f64,
    pub seed: u64,
    pub wall_time_seconds: f64,
}

/// Samples identity vectors from the latent Gaussian until `target_count`
/// are admitted or `max_candidates` have been drawn.
///
/// Batch `b` of `candidate_batch` candidates is drawn from stream
/// `rng.derive(b)`. On exhaustion the error carries the partial pool.
pub fn sample_identity_vectors(
    cfg: &SamplerConfig,
    model: &PcaModel,
    latent: &LatentGaussian,
    rng: RngState,
) -> Result<(IdentityPool, SamplerStats)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut pool = IdentityPool::new(model.dim());
    let mut drawn = 0usize;
    let mut batch = 0u64;
    while pool.len() < cfg.target_count {
        if drawn >= cfg.max_candidates {
            let (accepted, rejected) = (pool.accepted, pool.rejected);
            return Err(Error::Exhaustion {
                accepted,
                rejected,
                partial: Box::new(pool),
            });
        }
        let size = cfg.candidate_batch.min(cfg.max_candidates - drawn);
        let mut cands = sample_feature_vectors(model, latent, size, rng.derive(batch))?;
        if cfg.normalize {
            normalize_rows(&mut cands)?;
        }
        let verdicts = pool.admit_rows(&cands, cfg.tau, cfg.target_count)?;
        drawn += verdicts.len();
        batch += 1;
        log::debug!(
            "sampler batch {batch}: pool {} / {}, rejected {}",
            pool.len(),
            cfg.target_count,
            pool.rejected
        );
    }
    let stats = SamplerStats {
        accepted: pool.accepted,
        rejected: pool.rejected,
        rejection_rate: pool.rejection_rate(),
        tau: cfg.tau,
        seed: cfg.seed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((pool, stats))
}

fn normalize_rows(m: &mut RowMatrix) -> Result<()> {
    for r in 0..m.nrows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::Domain(format!("sampled row {r} is the zero vector")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Greedy first-come filtering of existing vectors: returns kept and dropped
/// row indices.
pub fn filter_existing(vectors: &RowMatrix, tau: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if vectors.nrows() == 0 {
        return Err(Error::Shape("filter needs at least one row".into()));
    }
    let mut pool = IdentityPool::new(vectors.ncols());
    let verdicts = pool.admit_rows(vectors, tau, usize::MAX)?;
    let (kept, dropped): (Vec<usize>, Vec<usize>) = (0..verdicts.len()).partition(|&i| verdicts[i]);
    Ok((kept, dropped))
}

/// Maximum pairwise similarity inside `vectors`, via plain pair loops.
/// Quadratic; intended for audits of modest pools.
pub fn max_pairwise_similarity(vectors: &RowMatrix) -> Result<Option<(f64, usize, usize)>> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..vectors.nrows() {
        for j in i + 1..vectors.nrows() {
            let s = cosine_similarity(vectors.row(i), vectors.row(j))?;
            if best.is_none_or(|(b, _, _)| s > b) {
                best = Some((s, i, j));
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::FeatureVector;
    use crate::pca::{latent_gaussian_fit, pca_fit, PcaOptions};
    use rand_distr::{Distribution, StandardNormal};

    fn unit_pair(d: usize, c: f64) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[0] = c;
        v[1] = (1.0 - c * c).sqrt();
        v
    }

    #[test]
    fn admit_examples() {
        let d = 512;
        let mut pool = IdentityPool::new(d);
        assert!(admit(&mut pool, &FeatureVector::basis(d, 0), 0.3).unwrap());
        assert!(!admit(&mut pool, &FeatureVector::basis(d, 0), 0.3).unwrap());
        assert_eq!((pool.accepted, pool.rejected), (1, 1));

        let c = unit_pair(d, 0.29);
        let mut p1 = IdentityPool::new(d);
        admit(&mut p1, &FeatureVector::basis(d, 0), 0.3).unwrap();
        assert!(admit(&mut p1, &c, 0.3).unwrap());
        let mut p2 = IdentityPool::new(d);
        admit(&mut p2, &FeatureVector::basis(d, 0), 0.28).unwrap();
        assert!(!admit(&mut p2, &c, 0.28).unwrap());

        assert!(matches!(admit(&mut p2, &[1.0, 0.0], 0.3), Err(Error::Shape(_))));
    }

    #[test]
    fn admission_is_inclusive_at_tau() {
        let mut pool = IdentityPool::new(2);
        admit(&mut pool, &[1.0, 0.0], 0.5).unwrap();
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(admit(&mut pool, &[1.0, 1.0], s).unwrap());
    }

    #[test]
    fn filter_examples() {
        let d = 8;
        let rows = RowMatrix::from_rows(&[
            FeatureVector::basis(d, 0),
            FeatureVector::basis(d, 1),
            FeatureVector::basis(d, 0),
        ])
        .unwrap();
        assert_eq!(filter_existing(&rows, 0.3).unwrap(), (vec![0, 1], vec![2]));
        let ortho = RowMatrix::identity(d);
        assert_eq!(filter_existing(&ortho, 0.3).unwrap().0, (0..d).collect::<Vec<_>>());
        assert!(filter_existing(&RowMatrix::with_cols(3), 0.3).is_err());
    }

    fn brute_force_filter(m: &RowMatrix, tau: f64) -> Vec<usize> {
        let mut kept: Vec<usize> = Vec::new();
        for i in 0..m.nrows() {
            if kept.iter().all(|&k| cosine_similarity(m.row(i), m.row(k)).unwrap() <= tau) {
                kept.push(i);
            }
        }
        kept
    }

    #[test]
    fn filter_matches_brute_force() {
        // shared mean component pushes many pairs above tau
        let (n, d) = (1000, 512);
        let mut rng = RngState::new(77, 0).rng();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(z + if j < 4 { 6.0 } else { 0.0 });
            }
        }
        let m = RowMatrix::from_vec(n, d, data).unwrap();
        let (kept, dropped) = filter_existing(&m, 0.3).unwrap();
        assert!(!dropped.is_empty());
        assert_eq!(kept, brute_force_filter(&m, 0.3));
    }

    fn isotropic_models(d: usize, n: usize, seed: u64, offset: f64) -> (PcaModel, LatentGaussian) {
        let mut rng = RngState::new(seed, 0).rng();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for _ in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(z + offset);
            }
        }
        let corpus = RowMatrix::from_vec(n, d, data).unwrap();
        let pca = pca_fit(&corpus, d, PcaOptions::default()).unwrap();
        let lg = latent_gaussian_fit(&pca, &corpus).unwrap();
        (pca, lg)
    }

    #[test]
    fn small_isotropic_run_rejects_nothing() {
        let (pca, lg) = isotropic_models(512, 1024, 4, 0.0);
        let cfg = SamplerConfig::new(3, 1);
        let (pool, stats) = sample_identity_vectors(&cfg, &pca, &lg, RngState::new(1, 0)).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(stats.rejected, 0);
        assert_eq!(pool.rejection_rate(), 0.0);
    }

    #[test]
    fn impossible_tau_exhausts() {
        // strongly offset corpus: every pair of samples has positive similarity
        let (pca, lg) = isotropic_models(16, 200, 4, 10.0);
        let mut cfg = SamplerConfig::new(5, 2);
        cfg.tau = 0.0;
        cfg.max_candidates = 100;
        cfg.candidate_batch = 32;
        match sample_identity_vectors(&cfg, &pca, &lg, RngState::new(2, 0)) {
            Err(Error::Exhaustion { accepted, rejected, partial }) => {
                assert_eq!(accepted, 1);
                assert_eq!(rejected, 99);
                assert_eq!(partial.len(), 1);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn pool_is_independent_of_thread_count() {
        let (pca, lg) = isotropic_models(64, 300, 5, 0.3);
        let mut cfg = SamplerConfig::new(60, 3);
        cfg.candidate_batch = 100;
        cfg.max_candidates = 5000;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_identity_vectors(&cfg, &pca, &lg, RngState::new(3, 0)).unwrap().0)
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a, b);
        let worst = max_pairwise_similarity(a.vectors()).unwrap().unwrap().0;
        assert!(worst <= cfg.tau);
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::new(10, 0);
        assert!(c.validate().is_ok());
        c.max_candidates = 5;
        assert!(c.validate().is_err());
        let mut c = SamplerConfig::new(10, 0);
        c.tau = 1.0;
        assert!(c.validate().is_err());
        c.tau = -0.1;
        assert!(c.validate().is_err());
        let c = SamplerConfig::new(0, 0);
        assert!(c.validate().is_err());
    }
}

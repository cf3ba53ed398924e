//! Dataset audits: verification score distributions and EER, intra-class
//! noise, inter-class merging, separability and identity leakage.

use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::kernel::{all_pairs_max_similarity, batch_max_similarity, NormedRows, DEFAULT_ROW_BLOCK};
use crate::numkit::{dot, norm, row_norms, RngState, RowMatrix};

/// Cap on enumerated genuine pairs; above it pairs are subsampled.
pub const GENUINE_CAP: usize = 1_000_000;
pub const DEFAULT_IMPOSTOR_SAMPLE: usize = 1_000_000;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaThresholds {
    pub outlier: f64,
    pub merge: f64,
    pub separability: f64,
    pub leakage: f64,
}

impl Default for QaThresholds {
    fn default() -> Self {
        QaThresholds {
            outlier: 0.3,
            merge: 0.7,
            separability: 0.4,
            leakage: 0.7,
        }
    }
}

impl QaThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("outlier", self.outlier),
            ("merge", self.merge),
            ("separability", self.separability),
            ("leakage", self.leakage),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} threshold must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

/// Embeddings grouped by identity, with one reference direction per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEmbeddings {
    labels: Vec<String>,
    groups: Vec<RowMatrix>,
    centroids: RowMatrix,
}

fn cos_parts(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

impl DatasetEmbeddings {
    /// Centroids are the normalized means of each group.
    pub fn new(identities: Vec<(String, RowMatrix)>) -> Result<Self> {
        if identities.is_empty() {
            return Err(Error::Data("dataset has no identities".into()));
        }
        let dim = identities[0].1.ncols();
        let mut seen = HashSet::new();
        let mut centroids = RowMatrix::with_cols(dim);
        for (label, m) in &identities {
            if !seen.insert(label.as_str()) {
                return Err(Error::Data(format!("duplicate identity label `{label}`")));
            }
            if m.nrows() == 0 {
                return Err(Error::Data(format!("identity `{label}` has no embeddings")));
            }
            if m.ncols() != dim {
                return Err(Error::Shape(format!("identity `{label}` has dimension {}, expected {dim}", m.ncols())));
            }
            let mut mean = vec![0.0; dim];
            for r in m.rows() {
                let n = norm(r);
                if n == 0.0 {
                    return Err(Error::Domain(format!("identity `{label}` contains a zero embedding")));
                }
                mean.iter_mut().zip(r).for_each(|(a, x)| *a += x / n);
            }
            let n = norm(&mean);
            if n == 0.0 {
                return Err(Error::Domain(format!("identity `{label}` has a zero mean direction")));
            }
            mean.iter_mut().for_each(|x| *x /= n);
            centroids.push_row(&mean)?;
        }
        let (labels, groups) = identities.into_iter().unzip();
        Ok(DatasetEmbeddings {
            labels,
            groups,
            centroids,
        })
    }

    /// Replaces the centroids with given reference vectors (one per identity),
    /// e.g. the sampled identity vectors of a synthetic dataset.
    pub fn with_reference_directions(mut self, refs: &RowMatrix) -> Result<Self> {
        if refs.nrows() != self.groups.len() || refs.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "{}x{} reference vectors for {} identities of dimension {}",
                refs.nrows(),
                refs.ncols(),
                self.groups.len(),
                self.dim()
            )));
        }
        let mut c = RowMatrix::with_cols(self.dim());
        for r in refs.rows() {
            let n = norm(r);
            if n == 0.0 {
                return Err(Error::Domain("zero reference vector".into()));
            }
            c.push_row(&r.iter().map(|x| x / n).collect::<Vec<_>>())?;
        }
        self.centroids = c;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn identity_count(&self) -> usize {
        self.groups.len()
    }

    pub fn image_count(&self) -> usize {
        self.groups.iter().map(|g| g.nrows()).sum()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn groups(&self) -> &[RowMatrix] {
        &self.groups
    }

    pub fn centroids(&self) -> &RowMatrix {
        &self.centroids
    }

    fn image(&self, global: usize, offsets: &[usize]) -> (usize, &[f64]) {
        let g = offsets.partition_point(|&o| o <= global) - 1;
        (g, self.groups[g].row(global - offsets[g]))
    }
}

fn offsets(ds: &DatasetEmbeddings) -> Vec<usize> {
    let mut off = Vec::with_capacity(ds.groups.len() + 1);
    let mut acc = 0;
    for g in &ds.groups {
        off.push(acc);
        acc += g.nrows();
    }
    off.push(acc);
    off
}

/// Decodes the `p`-th pair `(i, j)`, `i < j`, in row-major order of an `m`-set.
fn unrank_pair(m: usize, mut p: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= m - 1 - i {
        p -= m - 1 - i;
        i += 1;
    }
    (i, i + 1 + p)
}

/// Within-identity and cross-identity cosine scores.
///
/// Genuine pairs are enumerated fully unless there are more than `genuine_cap`,
/// in which case `genuine_cap` pairs are drawn uniformly with replacement.
/// Impostor pairs are `impostor_sample` uniform draws over cross-identity
/// image pairs.
pub fn genuine_impostor_scores(
    ds: &DatasetEmbeddings,
    impostor_sample: usize,
    genuine_cap: usize,
    rng: RngState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if ds.identity_count() < 2 {
        return Err(Error::Data("genuine/impostor scores need at least 2 identities".into()));
    }
    let per: Vec<usize> = ds.groups.iter().map(|g| g.nrows() * (g.nrows() - 1) / 2).collect();
    let total: usize = per.iter().sum();
    if total == 0 {
        return Err(Error::Data("no identity has 2 or more embeddings".into()));
    }
    let norms: Vec<Vec<f64>> = ds.groups.iter().map(row_norms).collect();
    let pair_score = |g: usize, i: usize, j: usize| {
        let m = &ds.groups[g];
        cos_parts(m.row(i), m.row(j), norms[g][i], norms[g][j])
    };

    let mut g = rng.rng();
    let genuine_pairs: Vec<(usize, usize, usize)> = if total <= genuine_cap {
        ds.groups
            .iter()
            .enumerate()
            .flat_map(|(k, m)| {
                let n = m.nrows();
                (0..n).flat_map(move |i| (i + 1..n).map(move |j| (k, i, j)))
            })
            .collect()
    } else {
        let mut prefix = Vec::with_capacity(per.len() + 1);
        prefix.push(0);
        for p in &per {
            prefix.push(prefix.last().unwrap() + p);
        }
        (0..genuine_cap)
            .map(|_| {
                let r = g.random_range(0..total);
                let k = prefix.partition_point(|&o| o <= r) - 1;
                let (i, j) = unrank_pair(ds.groups[k].nrows(), r - prefix[k]);
                (k, i, j)
            })
            .collect()
    };
    let genuine = genuine_pairs.par_iter().map(|&(k, i, j)| pair_score(k, i, j)).collect();

    let off = offsets(ds);
    let n = *off.last().unwrap();
    let mut impostor_pairs = Vec::with_capacity(impostor_sample);
    while impostor_pairs.len() < impostor_sample {
        let a = g.random_range(0..n);
        let b = g.random_range(0..n);
        if ds.image(a, &off).0 != ds.image(b, &off).0 {
            impostor_pairs.push((a, b));
        }
    }
    let flat_norms: Vec<f64> = norms.concat();
    let impostor = impostor_pairs
        .par_iter()
        .map(|&(a, b)| cos_parts(ds.image(a, &off).1, ds.image(b, &off).1, flat_norms[a], flat_norms[b]))
        .collect();
    Ok((genuine, impostor))
}

/// Equal error rate over midpoint thresholds of the merged sorted scores.
///
/// A score is accepted when `score >= threshold`. Returns `(eer, threshold)`
/// at the threshold minimizing `|FAR − FRR|` (lowest threshold on ties), with
/// `eer = (FAR + FRR) / 2` there.
pub fn equal_error_rate(genuine: &[f64], impostor: &[f64]) -> Result<(f64, f64)> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Data("equal error rate needs genuine and impostor scores".into()));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let mut gs = genuine.to_vec();
    let mut is = impostor.to_vec();
    gs.sort_by(f64::total_cmp);
    is.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = gs.iter().chain(&is).copied().collect();
    merged.sort_by(f64::total_cmp);
    let (ng, ni) = (gs.len() as u128, is.len() as u128);

    let mut best: Option<(u128, f64, u128, u128)> = None;
    for w in merged.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let fr = gs.partition_point(|&s| s < t) as u128;
        let fa = ni - is.partition_point(|&s| s < t) as u128;
        // |fa/ni − fr/ng| compared exactly on a common denominator
        let gap = (fa * ng).abs_diff(fr * ni);
        if best.is_none_or(|(b, ..)| gap < b) {
            best = Some((gap, t, fa, fr));
        }
    }
    let (_, t, fa, fr) = best.expect("at least two scores");
    let far = fa as f64 / ni as f64;
    let frr = fr as f64 / ng as f64;
    Ok(((far + frr) / 2.0, t))
}

/// Fraction of embeddings whose cosine to their identity's reference
/// direction is below `threshold`, with the count.
pub fn intra_class_outliers(ds: &DatasetEmbeddings, threshold: f64) -> (usize, f64) {
    let count: usize = ds
        .groups
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let c = ds.centroids.row(k);
            m.rows().filter(|r| cos_parts(r, c, norm(r), 1.0) < threshold).count()
        })
        .sum();
    (count, count as f64 / ds.image_count() as f64)
}

pub fn intra_class_outlier_rate(ds: &DatasetEmbeddings, threshold: f64) -> Result<f64> {
    if ds.image_count() == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    Ok(intra_class_outliers(ds, threshold).1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePair {
    pub label_a: String,
    pub label_b: String,
    pub similarity: f64,
}

/// Identity pairs whose reference directions have cosine strictly above
/// `threshold`, most similar first.
pub fn inter_class_merge_pairs(ds: &DatasetEmbeddings, threshold: f64) -> Result<Vec<MergePair>> {
    let k = ds.identity_count();
    if k < 2 {
        return Err(Error::Data("merge detection needs at least 2 identities".into()));
    }
    let c = &ds.centroids;
    let mut hits: Vec<(usize, usize, f64)> = (0..k)
        .into_par_iter()
        .flat_map_iter(|a| {
            (a + 1..k).filter_map(move |b| {
                let s = cos_parts(c.row(a), c.row(b), 1.0, 1.0);
                (s > threshold).then_some((a, b, s))
            })
        })
        .collect();
    hits.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    Ok(hits
        .into_iter()
        .map(|(a, b, s)| MergePair {
            label_a: ds.labels[a].clone(),
            label_b: ds.labels[b].clone(),
            similarity: s,
        })
        .collect())
}

/// Rows whose best cosine against every other row is below `threshold`.
pub fn separability_count(vectors: &RowMatrix, threshold: f64) -> usize {
    let norms = row_norms(vectors);
    let set = NormedRows::new(vectors.as_slice(), &norms, vectors.ncols());
    all_pairs_max_similarity(&set, DEFAULT_ROW_BLOCK)
        .into_iter()
        .filter(|b| b.finish().0 < threshold)
        .count()
}

/// `curve[k-1]` is the separability count of the first `k` rows.
pub fn separability_curve(vectors: &RowMatrix, threshold: f64) -> Vec<usize> {
    let n = vectors.nrows();
    let norms = row_norms(vectors);
    // index of the first other row that conflicts with row i, or n
    let first_conflict: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let r = vectors.row(i);
            (0..n)
                .find(|&j| j != i && cos_parts(r, vectors.row(j), norms[i], norms[j]) >= threshold)
                .unwrap_or(n)
        })
        .collect();
    // row i counts for prefix lengths k with i < k <= first_conflict[i]
    let mut delta = vec![0i64; n + 2];
    for (i, &f) in first_conflict.iter().enumerate() {
        if f > i {
            delta[i + 1] += 1;
            delta[f + 1] -= 1;
        }
    }
    let mut acc = 0i64;
    (1..=n)
        .map(|k| {
            acc += delta[k];
            acc as usize
        })
        .collect()
}

/// Fraction of synthetic rows whose best cosine against the reference set
/// exceeds `threshold`, and their indices.
pub fn identity_leakage_rate(synthetic: &RowMatrix, reference: &RowMatrix, threshold: f64) -> Result<(f64, Vec<usize>)> {
    if synthetic.nrows() == 0 || reference.nrows() == 0 {
        return Err(Error::Data("leakage needs nonempty synthetic and reference sets".into()));
    }
    if synthetic.ncols() != reference.ncols() {
        return Err(Error::Shape(format!(
            "synthetic dimension {} against reference dimension {}",
            synthetic.ncols(),
            reference.ncols()
        )));
    }
    let d = synthetic.ncols();
    let sn = row_norms(synthetic);
    let rn = row_norms(reference);
    let pool = NormedRows::new(reference.as_slice(), &rn, d);
    const CHUNK: usize = 1024;
    let best: Vec<f64> = (0..synthetic.nrows().div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(synthetic.nrows());
            let cands = NormedRows::new(&synthetic.as_slice()[lo * d..hi * d], &sn[lo..hi], d);
            batch_max_similarity(&cands, &pool, reference.nrows(), DEFAULT_ROW_BLOCK)
                .into_iter()
                .map(|b| b.finish().0)
        })
        .collect();
    let hits: Vec<usize> = best.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect();
    Ok((hits.len() as f64 / synthetic.nrows() as f64, hits))
}

/// Fixed-width score histogram over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(scores: &[f64], bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        for &s in scores {
            let b = (((s + 1.0) / 2.0) * bins as f64).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Histogram { lo: -1.0, hi: 1.0, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.counts.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub identities: usize,
    pub images: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    /// `None` when no identity has two embeddings.
    pub eer: Option<f64>,
    pub eer_threshold: Option<f64>,
    pub genuine_histogram: Histogram,
    pub impostor_histogram: Histogram,
    pub outliers: usize,
    pub outlier_rate: f64,
    pub merge_pairs: Vec<MergePair>,
    /// Counted over the identity vectors when given, else over the
    /// per-identity reference directions.
    pub separability_count: usize,
    pub separability_total: usize,
    pub leakage_rate: Option<f64>,
    pub leakage_indices: Vec<usize>,
    pub thresholds: QaThresholds,
    pub impostor_sample: usize,
    pub seed: u64,
}

impl QaReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("report: {e}")))
    }

    /// `bin_lo,bin_hi,genuine,impostor` rows.
    pub fn histogram_csv(&self) -> String {
        let g = &self.genuine_histogram;
        let mut out = String::from("bin_lo,bin_hi,genuine,impostor\n");
        for i in 0..g.counts.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                g.edge(i),
                g.edge(i + 1),
                g.counts[i],
                self.impostor_histogram.counts.get(i).copied().unwrap_or(0)
            ));
        }
        out
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let eer = self.eer.map_or("n/a".to_string(), |e| format!("{e:.4}"));
        let leak = self.leakage_rate.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        format!(
            "identities {}  images {}\nEER {eer}  (genuine {}, impostor {})\noutlier rate {:.4} ({} images, threshold {})\nmerge pairs {} (threshold {})\nseparable {}/{} (threshold {})\nleakage {leak} (threshold {})\n",
            self.identities,
            self.images,
            self.genuine_pairs,
            self.impostor_pairs,
            self.outlier_rate,
            self.outliers,
            self.thresholds.outlier,
            self.merge_pairs.len(),
            self.thresholds.merge,
            self.separability_count,
            self.separability_total,
            self.thresholds.separability,
            self.thresholds.leakage,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOptions {
    pub thresholds: QaThresholds,
    pub impostor_sample: usize,
    pub genuine_cap: usize,
    pub seed: u64,
}

impl AuditOptions {
    pub fn new(seed: u64) -> Self {
        AuditOptions {
            thresholds: QaThresholds::default(),
            impostor_sample: DEFAULT_IMPOSTOR_SAMPLE,
            genuine_cap: GENUINE_CAP,
            seed,
        }
    }
}

/// Runs every audit on a dataset. `id_vectors` (one per identity) feed the
/// separability count; `reference` enables the leakage scan over centroids.
pub fn audit(
    ds: &DatasetEmbeddings,
    id_vectors: Option<&RowMatrix>,
    reference: Option<&RowMatrix>,
    opts: &AuditOptions,
) -> Result<QaReport> {
    opts.thresholds.validate()?;
    let t = opts.thresholds;
    let has_pairs = ds.groups.iter().any(|g| g.nrows() >= 2);
    let (genuine, impostor) = if ds.identity_count() >= 2 && has_pairs {
        genuine_impostor_scores(ds, opts.impostor_sample, opts.genuine_cap, RngState::new(opts.seed, 0x9a))?
    } else {
        (Vec::new(), Vec::new())
    };
    let (eer, eer_threshold) = if genuine.is_empty() || impostor.is_empty() {
        (None, None)
    } else {
        let (e, th) = equal_error_rate(&genuine, &impostor)?;
        (Some(e), Some(th))
    };
    let (outliers, outlier_rate) = intra_class_outliers(ds, t.outlier);
    let merge_pairs = if ds.identity_count() >= 2 {
        inter_class_merge_pairs(ds, t.merge)?
    } else {
        Vec::new()
    };
    let sep_basis = id_vectors.unwrap_or(&ds.centroids);
    let (leakage_rate, leakage_indices) = match reference {
        Some(r) => {
            let (rate, idx) = identity_leakage_rate(&ds.centroids, r, t.leakage)?;
            (Some(rate), idx)
        }
        None => (None, Vec::new()),
    };
    Ok(QaReport {
        identities: ds.identity_count(),
        images: ds.image_count(),
        genuine_pairs: genuine.len(),
        impostor_pairs: impostor.len(),
        eer,
        eer_threshold,
        genuine_histogram: Histogram::of(&genuine, HISTOGRAM_BINS),
        impostor_histogram: Histogram::of(&impostor, HISTOGRAM_BINS),
        outliers,
        outlier_rate,
        merge_pairs,
        separability_count: separability_count(sep_basis, t.separability),
        separability_total: sep_basis.nrows(),
        leakage_rate,
        leakage_indices,
        thresholds: t,
        impostor_sample: opts.impostor_sample,
        seed: opts.seed,
    })
}

//! Dot products and exact cosine-similarity scans.
//!
//! Every dot product in the crate goes through one accumulation order: eight
//! interleaved lane accumulators updated with fused multiply-add, the tail
//! folded into the leading lanes, then a fixed pairwise reduction. The tiled
//! scan kernels evaluate several pairs at once but keep that per-pair order,
//! so a blocked scan, a parallel scan and a naive one-pair-at-a-time loop all
//! produce bitwise-identical similarities. `f64::mul_add` is correctly
//! rounded with or without hardware FMA, so the SIMD dispatch only changes
//! speed.

use rayon::prelude::*;

use super::matrix::RowMatrix;
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Minimum rows per parallel block; keeps blocks at least one tile tall.
const TILE_R: usize = 4;

/// Pool rows handled by one parallel work item.
pub const DEFAULT_ROW_BLOCK: usize = 1024;

#[inline(always)]
fn reduce(acc: &[f64; LANES]) -> f64 {
    let t0 = acc[0] + acc[4];
    let t1 = acc[1] + acc[5];
    let t2 = acc[2] + acc[6];
    let t3 = acc[3] + acc[7];
    (t0 + t2) + (t1 + t3)
}

#[inline(always)]
fn tile_dots<const C: usize, const R: usize>(a: &[&[f64]; C], b: &[&[f64]; R]) -> [[f64; R]; C] {
    let d = a[0].len();
    let full = d / LANES * LANES;
    let mut acc = [[[0.0f64; LANES]; R]; C];
    let mut base = 0;
    while base < full {
        let av: [&[f64; LANES]; C] =
            std::array::from_fn(|i| a[i][base..base + LANES].try_into().unwrap());
        let bv: [&[f64; LANES]; R] =
            std::array::from_fn(|j| b[j][base..base + LANES].try_into().unwrap());
        for i in 0..C {
            for j in 0..R {
                for l in 0..LANES {
                    acc[i][j][l] = av[i][l].mul_add(bv[j][l], acc[i][j][l]);
                }
            }
        }
        base += LANES;
    }
    for t in full..d {
        for i in 0..C {
            for j in 0..R {
                let l = t - full;
                acc[i][j][l] = a[i][t].mul_add(b[j][t], acc[i][j][l]);
            }
        }
    }
    let mut out = [[0.0; R]; C];
    for i in 0..C {
        for j in 0..R {
            out[i][j] = reduce(&acc[i][j]);
        }
    }
    out
}

/// Running maximum for one candidate. Ties keep the lowest row index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Best {
    pub similarity: f64,
    pub index: Option<usize>,
}

impl Best {
    pub const NONE: Best = Best {
        similarity: f64::NEG_INFINITY,
        index: None,
    };

    #[inline(always)]
    fn offer(&mut self, similarity: f64, index: usize) {
        if similarity > self.similarity {
            self.similarity = similarity;
            self.index = Some(index);
        }
    }

    /// Combine two partial results; `self` must cover lower row indices.
    pub fn merge(self, later: Best) -> Best {
        if later.similarity > self.similarity {
            later
        } else {
            self
        }
    }

    /// The public convention: an empty scan reports similarity -1.
    pub fn finish(self) -> (f64, Option<usize>) {
        match self.index {
            Some(i) => (self.similarity, Some(i)),
            None => (-1.0, None),
        }
    }
}

#[inline(always)]
fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Candidate rows with cached norms.
pub struct NormedRows<'a> {
    pub rows: &'a [f64],
    pub norms: &'a [f64],
    pub dim: usize,
}

impl<'a> NormedRows<'a> {
    pub fn new(rows: &'a [f64], norms: &'a [f64], dim: usize) -> Self {
        debug_assert_eq!(rows.len(), norms.len() * dim);
        NormedRows { rows, norms, dim }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    #[inline(always)]
    fn row(&self, i: usize) -> &'a [f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// A fixed-size block of dot products with the canonical accumulation order.
trait Tile<const C: usize, const R: usize> {
    /// # Safety
    /// The CPU must support the instructions the implementation uses.
    unsafe fn dots(a: &[&[f64]; C], b: &[&[f64]; R]) -> [[f64; R]; C];
}

struct Portable;

impl<const C: usize, const R: usize> Tile<C, R> for Portable {
    #[inline(always)]
    unsafe fn dots(a: &[&[f64]; C], b: &[&[f64]; R]) -> [[f64; R]; C] {
        tile_dots::<C, R>(a, b)
    }
}

/// Candidates kept hot in cache while pool rows stream past.
const CAND_CHUNK: usize = 64;

/// Scan candidates `cands` against pool rows `[lo, hi)`, updating `best`.
/// If `self_offset` is set, candidate `c` never compares against pool row
/// `self_offset + c` (used for within-set scans).
#[inline(always)]
unsafe fn scan_range_with<K, const C: usize, const R: usize>(
    cands: &NormedRows<'_>,
    pool: &NormedRows<'_>,
    lo: usize,
    hi: usize,
    best: &mut [Best],
    self_offset: Option<usize>,
) where
    K: Tile<C, R>,
{
    let nc = cands.len();
    let full_r = lo + (hi - lo) / R * R;
    let mut chunk = 0;
    while chunk < nc {
        let chunk_end = (chunk + CAND_CHUNK).min(nc);
        let full_c = chunk + (chunk_end - chunk) / C * C;
        let mut r = lo;
        while r < full_r {
            let mut rows: [&[f64]; R] = [&[]; R];
            for (j, slot) in rows.iter_mut().enumerate() {
                *slot = pool.row(r + j);
            }
            let mut c = chunk;
            while c < full_c {
                let mut cs: [&[f64]; C] = [&[]; C];
                for (i, slot) in cs.iter_mut().enumerate() {
                    *slot = cands.row(c + i);
                }
                let dots = K::dots(&cs, &rows);
                for i in 0..C {
                    for j in 0..R {
                        let row = r + j;
                        if self_offset.is_some_and(|o| o + c + i == row) {
                            continue;
                        }
                        let s = cosine_from_parts(dots[i][j], cands.norms[c + i], pool.norms[row]);
                        best[c + i].offer(s, row);
                    }
                }
                c += C;
            }
            while c < chunk_end {
                let dots = tile_dots::<1, R>(&[cands.row(c)], &rows);
                for j in 0..R {
                    let row = r + j;
                    if self_offset.is_some_and(|o| o + c == row) {
                        continue;
                    }
                    let s = cosine_from_parts(dots[0][j], cands.norms[c], pool.norms[row]);
                    best[c].offer(s, row);
                }
                c += 1;
            }
            r += R;
        }
        while r < hi {
            let row = pool.row(r);
            for c in chunk..chunk_end {
                if self_offset.is_some_and(|o| o + c == r) {
                    continue;
                }
                let dot = tile_dots::<1, 1>(&[cands.row(c)], &[row])[0][0];
                let s = cosine_from_parts(dot, cands.norms[c], pool.norms[r]);
                best[c].offer(s, r);
            }
            r += 1;
        }
        chunk = chunk_end;
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(unused_unsafe)]
mod x86 {
    use std::arch::x86_64::*;

    use super::*;

    pub struct Avx512;

    impl<const C: usize, const R: usize> Tile<C, R> for Avx512 {
        #[inline(always)]
        unsafe fn dots(a: &[&[f64]; C], b: &[&[f64]; R]) -> [[f64; R]; C] {
            let d = a[0].len();
            let full = d / LANES * LANES;
            let mut acc = [[unsafe { _mm512_setzero_pd() }; R]; C];
            let mut base = 0;
            while base < full {
                let mut bv = [unsafe { _mm512_setzero_pd() }; R];
                for j in 0..R {
                    bv[j] = unsafe { _mm512_loadu_pd(b[j].as_ptr().add(base)) };
                }
                for i in 0..C {
                    let av = unsafe { _mm512_loadu_pd(a[i].as_ptr().add(base)) };
                    for j in 0..R {
                        acc[i][j] = unsafe { _mm512_fmadd_pd(av, bv[j], acc[i][j]) };
                    }
                }
                base += LANES;
            }
            let mut out = [[0.0; R]; C];
            for i in 0..C {
                for j in 0..R {
                    let mut lanes = [0.0f64; LANES];
                    unsafe { _mm512_storeu_pd(lanes.as_mut_ptr(), acc[i][j]) };
                    for t in full..d {
                        lanes[t - full] = a[i][t].mul_add(b[j][t], lanes[t - full]);
                    }
                    out[i][j] = reduce(&lanes);
                }
            }
            out
        }
    }

    pub struct Avx2;

    impl<const C: usize, const R: usize> Tile<C, R> for Avx2 {
        #[inline(always)]
        unsafe fn dots(a: &[&[f64]; C], b: &[&[f64]; R]) -> [[f64; R]; C] {
            let d = a[0].len();
            let full = d / LANES * LANES;
            let zero = unsafe { _mm256_setzero_pd() };
            let mut lo_acc = [[zero; R]; C];
            let mut hi_acc = [[zero; R]; C];
            let mut base = 0;
            while base < full {
                for i in 0..C {
                    let alo = unsafe { _mm256_loadu_pd(a[i].as_ptr().add(base)) };
                    let ahi = unsafe { _mm256_loadu_pd(a[i].as_ptr().add(base + 4)) };
                    for j in 0..R {
                        let blo = unsafe { _mm256_loadu_pd(b[j].as_ptr().add(base)) };
                        let bhi = unsafe { _mm256_loadu_pd(b[j].as_ptr().add(base + 4)) };
                        lo_acc[i][j] = unsafe { _mm256_fmadd_pd(alo, blo, lo_acc[i][j]) };
                        hi_acc[i][j] = unsafe { _mm256_fmadd_pd(ahi, bhi, hi_acc[i][j]) };
                    }
                }
                base += LANES;
            }
            let mut out = [[0.0; R]; C];
            for i in 0..C {
                for j in 0..R {
                    let mut lanes = [0.0f64; LANES];
                    unsafe {
                        _mm256_storeu_pd(lanes.as_mut_ptr(), lo_acc[i][j]);
                        _mm256_storeu_pd(lanes.as_mut_ptr().add(4), hi_acc[i][j]);
                    }
                    for t in full..d {
                        lanes[t - full] = a[i][t].mul_add(b[j][t], lanes[t - full]);
                    }
                    out[i][j] = reduce(&lanes);
                }
            }
            out
        }
    }

    #[target_feature(enable = "avx512f,fma")]
    pub unsafe fn scan_avx512(
        cands: &NormedRows<'_>,
        pool: &NormedRows<'_>,
        lo: usize,
        hi: usize,
        best: &mut [Best],
        self_offset: Option<usize>,
    ) {
        unsafe { scan_range_with::<Avx512, 4, 4>(cands, pool, lo, hi, best, self_offset) }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn scan_avx2(
        cands: &NormedRows<'_>,
        pool: &NormedRows<'_>,
        lo: usize,
        hi: usize,
        best: &mut [Best],
        self_offset: Option<usize>,
    ) {
        unsafe { scan_range_with::<Avx2, 2, 3>(cands, pool, lo, hi, best, self_offset) }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot_fma(a: &[f64], b: &[f64]) -> f64 {
        unsafe { <Avx2 as Tile<1, 1>>::dots(&[a], &[b])[0][0] }
    }
}

fn scan_range(
    cands: &NormedRows<'_>,
    pool: &NormedRows<'_>,
    lo: usize,
    hi: usize,
    best: &mut [Best],
    self_offset: Option<usize>,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { x86::scan_avx512(cands, pool, lo, hi, best, self_offset) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            return unsafe { x86::scan_avx2(cands, pool, lo, hi, best, self_offset) };
        }
    }
    // SAFETY: the portable kernel has no CPU requirements.
    unsafe { scan_range_with::<Portable, 2, 2>(cands, pool, lo, hi, best, self_offset) }
}

/// Fixed-order dot product. Panics if lengths differ.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot product of vectors with different lengths");
    if a.is_empty() {
        return 0.0;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("fma") && std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { x86::dot_fma(a, b) };
        }
    }
    tile_dots::<1, 1>(&[a], &[b])[0][0]
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity ⟨a,b⟩ / (‖a‖‖b‖), clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine similarity of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity with a zero vector".into()));
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

pub fn row_norms(m: &RowMatrix) -> Vec<f64> {
    m.rows().map(norm).collect()
}

/// Best match of every candidate against pool rows `[0, limit)`.
///
/// Row blocks of `row_block` rows are scanned in parallel and merged in
/// block order, so the result does not depend on block size or thread count.
pub fn batch_max_similarity(
    cands: &NormedRows<'_>,
    pool: &NormedRows<'_>,
    limit: usize,
    row_block: usize,
) -> Vec<Best> {
    let row_block = row_block.max(TILE_R);
    let nblocks = limit.div_ceil(row_block);
    let nc = cands.len();
    if nblocks <= 1 {
        let mut best = vec![Best::NONE; nc];
        scan_range(cands, pool, 0, limit, &mut best, None);
        return best;
    }
    (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * row_block;
            let hi = ((b + 1) * row_block).min(limit);
            let mut best = vec![Best::NONE; nc];
            scan_range(cands, pool, lo, hi, &mut best, None);
            best
        })
        .reduce_with(|lower, upper| lower.into_iter().zip(upper).map(|(a, b)| a.merge(b)).collect())
        .unwrap_or_else(|| vec![Best::NONE; nc])
}

/// For every row of `set`, the best match among all *other* rows of `set`.
pub fn all_pairs_max_similarity(set: &NormedRows<'_>, row_block: usize) -> Vec<Best> {
    let n = set.len();
    let row_block = row_block.max(TILE_R);
    let nblocks = n.div_ceil(row_block);
    // Each work item owns a block of query rows and scans every pool row,
    // so merging is by concatenation.
    let per_block: Vec<Vec<Best>> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * row_block;
            let hi = ((b + 1) * row_block).min(n);
            let q = NormedRows::new(&set.rows[lo * set.dim..hi * set.dim], &set.norms[lo..hi], set.dim);
            let mut best = vec![Best::NONE; hi - lo];
            scan_range(&q, set, 0, n, &mut best, Some(lo));
            best
        })
        .collect();
    per_block.into_iter().flatten().collect()
}

/// Maximum cosine similarity of `candidate` against every row of `pool`,
/// scanned in blocks of `block` rows. Returns `(-1.0, None)` for an empty pool.
pub fn max_similarity_blocked(
    candidate: &[f64],
    pool: &RowMatrix,
    pool_norms: &[f64],
    block: usize,
) -> Result<(f64, Option<usize>)> {
    if pool.nrows() > 0 && candidate.len() != pool.ncols() {
        return Err(Error::Shape(format!(
            "candidate of length {} against pool of dimension {}",
            candidate.len(),
            pool.ncols()
        )));
    }
    if pool_norms.len() != pool.nrows() {
        return Err(Error::Shape("pool norm cache does not match pool rows".into()));
    }
    let cn = norm(candidate);
    if cn == 0.0 {
        return Err(Error::Domain("zero candidate vector".into()));
    }
    let cands = NormedRows::new(candidate, std::slice::from_ref(&cn), candidate.len());
    let rows = NormedRows::new(pool.as_slice(), pool_norms, pool.ncols());
    Ok(batch_max_similarity(&cands, &rows, pool.nrows(), block)[0].finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::RngState;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> RowMatrix {
        let mut rng = RngState::new(seed, 0).rng();
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        RowMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_scan(c: &[f64], pool: &RowMatrix) -> (f64, Option<usize>) {
        let mut best = (-1.0, None);
        let mut seen = false;
        for (i, r) in pool.rows().enumerate() {
            let s = cosine_similarity(c, r).unwrap();
            if !seen || s > best.0 {
                best = (s, Some(i));
                seen = true;
            }
        }
        best
    }

    #[test]
    fn cosine_examples() {
        let d = 512;
        let e1 = crate::numkit::FeatureVector::basis(d, 0);
        let e2 = crate::numkit::FeatureVector::basis(d, 1);
        assert_eq!(cosine_similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        v[1] = 1.0;
        let s = cosine_similarity(&v, &e1).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn blocked_scan_examples() {
        let d = 512;
        let pool = RowMatrix::from_rows(&[
            crate::numkit::FeatureVector::basis(d, 1),
            crate::numkit::FeatureVector::basis(d, 2),
        ])
        .unwrap();
        let norms = row_norms(&pool);
        let e1 = crate::numkit::FeatureVector::basis(d, 0);
        assert_eq!(max_similarity_blocked(&e1, &pool, &norms, 1).unwrap(), (0.0, Some(0)));

        let empty = RowMatrix::with_cols(d);
        assert_eq!(max_similarity_blocked(&e1, &empty, &[], 64).unwrap(), (-1.0, None));

        let pool = RowMatrix::from_rows(&[
            crate::numkit::FeatureVector::basis(d, 0),
            crate::numkit::FeatureVector::basis(d, 1),
        ])
        .unwrap();
        let mut c = vec![0.0; d];
        c[0] = 1.0;
        c[1] = 1.0;
        let (s, i) = max_similarity_blocked(&c, &pool, &row_norms(&pool), 16).unwrap();
        assert_eq!(i, Some(0));
        assert!((s - 0.70710678).abs() < 1e-8);
        assert!(max_similarity_blocked(&c[..10], &pool, &row_norms(&pool), 16).is_err());
    }

    #[test]
    fn blocked_equals_naive_bitwise_for_any_block_size() {
        for (n, d) in [(1usize, 3usize), (7, 13), (133, 64), (1000, 37)] {
            let pool = random_matrix(n, d, 11 + n as u64);
            let norms = row_norms(&pool);
            let cands = random_matrix(9, d, 5);
            for c in cands.rows() {
                let oracle = naive_scan(c, &pool);
                for block in [1, 4, 5, 64, 4096] {
                    let got = max_similarity_blocked(c, &pool, &norms, block).unwrap();
                    assert_eq!(got.1, oracle.1);
                    assert_eq!(got.0.to_bits(), oracle.0.to_bits());
                }
            }
        }
    }

    #[test]
    fn tiled_dots_match_single_pair_dot() {
        let a = random_matrix(5, 531, 1);
        let b = random_matrix(6, 531, 2);
        let an = row_norms(&a);
        let bn = row_norms(&b);
        let best = batch_max_similarity(
            &NormedRows::new(a.as_slice(), &an, 531),
            &NormedRows::new(b.as_slice(), &bn, 531),
            6,
            4,
        );
        for (i, r) in a.rows().enumerate() {
            let (s, idx) = naive_scan(r, &b);
            assert_eq!(best[i].finish(), (s, idx));
        }
        let generic = tile_dots::<1, 1>(&[a.row(0)], &[b.row(0)])[0][0];
        assert_eq!(generic.to_bits(), dot(a.row(0), b.row(0)).to_bits());
    }

    #[test]
    fn all_pairs_skips_self() {
        let m = RowMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let norms = row_norms(&m);
        let best = all_pairs_max_similarity(&NormedRows::new(m.as_slice(), &norms, 2), 4);
        assert_eq!(best[0].finish(), (1.0, Some(1)));
        assert_eq!(best[1].finish(), (1.0, Some(0)));
        assert_eq!(best[2].finish(), (0.0, Some(0)));
    }

    #[test]
    fn scale_invariance() {
        let a = random_matrix(1, 512, 3);
        let scaled: Vec<f64> = a.row(0).iter().map(|x| x * 3.5).collect();
        assert!((cosine_similarity(a.row(0), &scaled).unwrap() - 1.0).abs() < 1e-12);
    }
}

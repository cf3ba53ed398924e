//! Acceptance suite. Runs every criterion in sequence and prints one
//! `PASS`/`FAIL` line each; exits nonzero if any criterion fails.
//!
//! Oracles here are written independently of the library: pair audits use
//! an f32 GEMM screen with f64 rechecks, EER uses linear scans over every
//! midpoint threshold, covariances are recomputed with nalgebra.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use idforge_core::attrop::{attrop_adjust, attrop_loss, loss_gradient, measure_vector, AttrOpConfig, Evaluators};
use idforge_core::corpus::{synthetic_corpus, CorpusSpec};
use idforge_core::format::{decode_idv, encode_idv, read_idv, write_idv};
use idforge_core::genbridge::{
    bridge_generate, decode_pnm, encode_pnm, BridgeOutput, PoseSurrogate, QualitySurrogate, ToyGenerator,
};
use idforge_core::idsampler::sample_identity_vectors;
use idforge_core::pca::{latent_gaussian_fit, pca_fit, sample_feature_vectors, PcaOptions};
use idforge_core::perturb::{perturb_all, perturb_identity};
use idforge_core::pipeline::{adjust_variant, run_pipeline, Replacement, RunOptions};
use idforge_core::qa::{equal_error_rate, identity_leakage_rate, inter_class_merge_pairs, intra_class_outliers};
use idforge_core::qa::{separability_count, DatasetEmbeddings};
use idforge_core::{
    BridgeConfig, BridgeMode, Image, LatentGaussian, PcaModel, PerturbSpec, PipelineConfig, RngState, RowMatrix,
    SamplerConfig, SamplerStats,
};

const SEED: u64 = 2024;
const TAU: f64 = 0.3;

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Shared {
    corpus: RowMatrix,
    model: PcaModel,
    latent: LatentGaussian,
    pool_10k: RowMatrix,
    pool_100k: Option<(RowMatrix, SamplerStats, f64)>,
}

fn gaussian_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n * d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Pairs with cosine >= `tau`: f32 GEMM screen over unit rows, then an f64
/// recheck of every screened pair. Returns (count, approximate max cosine).
fn pairs_at_or_above(m: &RowMatrix, tau: f64) -> (usize, f64) {
    let n = m.nrows();
    let d = m.ncols();
    let mut data = Vec::with_capacity(n * d);
    for r in m.rows() {
        data.extend(unit(r).into_iter().map(|x| x as f32));
    }
    // column j of `ut` is unit row j
    let ut = DMatrix::<f32>::from_vec(d, n, data);
    const RB: usize = 2048;
    const CB: usize = 8192;
    let screen = (tau - 1e-3) as f32;
    let mut hits = 0;
    let mut max = f32::NEG_INFINITY;
    for r0 in (0..n).step_by(RB) {
        let rb = RB.min(n - r0);
        let a = ut.columns(r0, rb).transpose();
        for c0 in (0..r0 + rb).step_by(CB) {
            let cb = CB.min(r0 + rb - c0);
            let g = &a * ut.columns(c0, cb);
            for j in 0..cb {
                let col = c0 + j;
                for i in 0..rb {
                    let row = r0 + i;
                    if col >= row {
                        continue;
                    }
                    let s = g[(i, j)];
                    max = max.max(s);
                    if s >= screen && naive_cos(m.row(row), m.row(col)) >= tau {
                        hits += 1;
                    }
                }
            }
        }
    }
    (hits, max as f64)
}

fn sample_pool(shared_model: &PcaModel, latent: &LatentGaussian, n: usize) -> (RowMatrix, SamplerStats, f64) {
    let started = Instant::now();
    let (pool, stats) =
        sample_identity_vectors(&SamplerConfig::new(n, SEED), shared_model, latent, RngState::new(SEED, 1)).unwrap();
    (pool.into_vectors(), stats, started.elapsed().as_secs_f64())
}

fn sampler_separation(sh: &mut Shared) -> Verdict {
    // the oracle must see a planted violation
    let mut planted = sh.pool_10k.select_rows(&(0..300).collect::<Vec<_>>());
    let copy: Vec<f64> = planted.row(7).iter().map(|x| x * 3.0).collect();
    planted.row_mut(250).copy_from_slice(&copy);
    if pairs_at_or_above(&planted, TAU).0 != 1 {
        return Err("oracle missed a planted duplicate".into());
    }
    let mut parts = Vec::new();
    let mut ok = true;
    let (pool_1k, _, _) = sample_pool(&sh.model, &sh.latent, 1000);
    for (name, pool) in [("1k", &pool_1k), ("10k", &sh.pool_10k)] {
        let (hits, max) = pairs_at_or_above(pool, TAU);
        ok &= hits == 0 && pool.nrows() == if name == "1k" { 1000 } else { 10_000 };
        parts.push(format!("{name}: {hits} pairs >= tau (max {max:.4})"));
    }
    let (pool, stats, secs) = sample_pool(&sh.model, &sh.latent, 100_000);
    let audit_start = Instant::now();
    let (hits, max) = pairs_at_or_above(&pool, TAU);
    ok &= hits == 0 && pool.nrows() == 100_000 && secs <= 300.0;
    parts.push(format!(
        "100k: {hits} pairs >= tau (max {max:.4}), sampled in {secs:.1}s (limit 300s, {} core(s)), audit {:.1}s",
        rayon::current_num_threads(),
        audit_start.elapsed().as_secs_f64()
    ));
    sh.pool_100k = Some((pool, stats, secs));
    ensure(ok, parts.join("; "))
}

fn rejection_rate(sh: &mut Shared) -> Verdict {
    let Some((_, stats, _)) = &sh.pool_100k else {
        return Err("100k pool unavailable".into());
    };
    ensure(
        stats.rejection_rate < 0.05,
        format!(
            "rejection rate {:.4} ({} rejected / {} drawn) at n=100k, d=512, tau=0.3 (limit < 0.05)",
            stats.rejection_rate,
            stats.rejected,
            stats.accepted + stats.rejected
        ),
    )
}

fn min_cos_over(sets: &[idforge_core::PerturbedSet], ids: &RowMatrix) -> (f64, usize) {
    let mut min = f64::INFINITY;
    let mut count = 0;
    for (i, s) in sets.iter().enumerate() {
        for v in s.variants.rows() {
            min = min.min(naive_cos(v, ids.row(i)));
            count += 1;
        }
    }
    (min, count)
}

fn perturbation_constraint(sh: &mut Shared) -> Verdict {
    let ids = sh.pool_10k.select_rows(&(0..2000).collect::<Vec<_>>());
    let mixtures: [&[(f64, f64)]; 3] = [&[(0.3, 1.0)], &[(0.3, 0.5), (0.5, 0.5)], &[(0.3, 0.4), (0.5, 0.4), (0.7, 0.2)]];
    let mut mins = Vec::new();
    let mut default_ok = false;
    let mut detail = String::new();
    for (k, mix) in mixtures.iter().enumerate() {
        let spec = PerturbSpec::with_mixture(mix);
        let sets = perturb_all(&ids, &spec, RngState::new(SEED, 20 + k as u64)).unwrap();
        let (min, count) = min_cos_over(&sets, &ids);
        if k == 2 {
            default_ok = spec == PerturbSpec::default() && count == 100_000 && min >= 0.5;
            detail = format!("default mixture: {count} variants, min cosine {min:.4}");
        }
        mins.push(min);
    }
    let monotone = mins.windows(2).all(|w| w[1] < w[0]);
    ensure(
        default_ok && monotone,
        format!(
            "{detail}; min similarity {{0.3}} {:.4} > {{0.3,0.5}} {:.4} > {{0.3,0.5,0.7}} {:.4}: {monotone}",
            mins[0], mins[1], mins[2]
        ),
    )
}

fn noise_oracle(sh: &mut Shared) -> Verdict {
    let v = sh.pool_10k.row(0).to_vec();
    let d = v.len() as f64;
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (sigma, is_std) in [(0.3, false), (0.5, false), (0.7, false), (0.5, true)] {
        let spec = PerturbSpec {
            images_per_id: 100_000,
            s_min: 0.0,
            sigma_is_std: is_std,
            ..PerturbSpec::with_mixture(&[(sigma, 1.0)])
        };
        let set = perturb_identity(&v, &spec, RngState::new(SEED, 30)).unwrap();
        let mean = set.variants.rows().map(|r| naive_cos(r, &v)).sum::<f64>() / 100_000.0;
        let s2 = if is_std { sigma * sigma } else { sigma };
        let expected = norm2.sqrt() / (norm2 + d * s2).sqrt();
        let rel = (mean / expected - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!(
            "{}={sigma}: mean {mean:.4} vs {expected:.4}",
            if is_std { "std" } else { "var" }
        ));
    }
    ensure(worst < 0.02, format!("{}; worst relative error {:.2e} (limit 0.02)", parts.join(", "), worst))
}

fn toy_evaluators(generator: &Arc<ToyGenerator>, axis: &[f64]) -> Evaluators {
    Evaluators::new(
        Arc::new(PoseSurrogate::new(generator.clone(), axis).unwrap()),
        Arc::new(QualitySurrogate::new(generator.clone(), 0.0, 27.0)),
        generator.clone(),
    )
}

fn attrop_criteria(_: &mut Shared) -> Verdict {
    let d = 512;
    let generator = Arc::new(ToyGenerator::with_defaults(d, SEED).unwrap());
    let cfg = AttrOpConfig::default();

    // gradients against an independent central difference of the loss
    let h = 1e-6;
    let mut worst_grad: f64 = 0.0;
    for p in 0..20u64 {
        let mut g = RngState::new(SEED, 100 + p).rng();
        let v_id = unit(&gaussian_rows(1, d, &mut g));
        let noisy: Vec<f64> = v_id.iter().map(|x| 20.0 * x + 0.3f64.sqrt() * normal(&mut g)).collect();
        let v = unit(&noisy);
        let ev = toy_evaluators(&generator, &gaussian_rows(1, d, &mut g));
        let (_, analytic) = loss_gradient(&v, &v_id, generator.as_ref(), &ev, &cfg).unwrap();
        let loss = |x: &[f64]| attrop_loss(&generator.generate(x).unwrap(), &v_id, &ev, &cfg).unwrap().0;
        let mut num = vec![0.0; d];
        let mut x = v.clone();
        for i in 0..d {
            x[i] = v[i] + h;
            let up = loss(&x);
            x[i] = v[i] - h;
            let down = loss(&x);
            x[i] = v[i];
            num[i] = (up - down) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(diff / scale);
    }

    // seeded trials from a start pose in [0, 5) deg
    let trial_cfg = AttrOpConfig {
        target_pose: 60.0,
        iterations: 20,
        ..AttrOpConfig::default()
    };
    let mut successes = 0;
    let mut worst_pose: f64 = 0.0;
    let mut min_cos = f64::INFINITY;
    for t in 0..100u64 {
        let mut g = RngState::new(SEED, 1000 + t).rng();
        let v_id = unit(&gaussian_rows(1, d, &mut g));
        let noisy: Vec<f64> = v_id.iter().map(|x| 20.0 * x + 0.3f64.sqrt() * normal(&mut g)).collect();
        let v_im = unit(&noisy);
        let e = generator.embed(&generator.generate(&v_im).unwrap()).unwrap();
        let c = g.random_range(0.0..5.0) / 90.0;
        let w = gaussian_rows(1, d, &mut g);
        let we: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum();
        let w = unit(&w.iter().zip(&e).map(|(a, b)| a - we * b).collect::<Vec<_>>());
        let axis: Vec<f64> = e.iter().zip(&w).map(|(a, b)| c * a + (1.0 - c * c).sqrt() * b).collect();
        let ev = toy_evaluators(&generator, &axis);
        let (start_pose, _) = measure_vector(&v_im, &v_id, generator.as_ref(), &ev).unwrap();
        assert!((0.0..5.0 + 1e-9).contains(&start_pose), "start pose {start_pose}");
        let (v, _) = attrop_adjust(&v_id, &v_im, generator.as_ref(), &ev, &trial_cfg).unwrap();
        let (pose, cos) = measure_vector(&v, &v_id, generator.as_ref(), &ev).unwrap();
        worst_pose = worst_pose.max((pose - 60.0).abs());
        min_cos = min_cos.min(cos);
        if (pose - 60.0).abs() < 5.0 && cos >= 0.5 {
            successes += 1;
        }
    }

    // T = 0 leaves the input untouched, bit for bit
    let zero = AttrOpConfig {
        iterations: 0,
        ..AttrOpConfig::default()
    };
    let mut g = RngState::new(SEED, 7).rng();
    let v_id = unit(&gaussian_rows(1, d, &mut g));
    let raw = gaussian_rows(1, d, &mut g);
    let ev = toy_evaluators(&generator, &gaussian_rows(1, d, &mut g));
    let (same, trace) = attrop_adjust(&v_id, &raw, generator.as_ref(), &ev, &zero).unwrap();
    let (same_scaled, _) = adjust_variant(&v_id, &raw, generator.as_ref(), &ev, &zero).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let noop = bits(&same) == bits(&raw) && bits(&same_scaled) == bits(&raw) && trace.records.len() == 1;

    ensure(
        worst_grad < 1e-4 && successes >= 95 && noop,
        format!(
            "gradient rel. error max {worst_grad:.2e} over 20 probes (limit 1e-4); {successes}/100 trials reach |pose-60|<5 with cos>=0.5 (worst |pose-60| {worst_pose:.2}, min cos {min_cos:.3}); T=0 bitwise no-op: {noop}"
        ),
    )
}

fn covariance(m: &RowMatrix) -> DMatrix<f64> {
    let (n, d) = (m.nrows(), m.ncols());
    let x = DMatrix::<f64>::from_row_slice(n, d, m.as_slice());
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    (c.transpose() * &c) / (n as f64 - 1.0)
}

fn pca_criteria(sh: &mut Shared) -> Verdict {
    let d = sh.corpus.ncols();
    let mut worst_rt: f64 = 0.0;
    for whiten in [false, true] {
        let model = pca_fit(&sh.corpus, d, PcaOptions { whiten }).unwrap();
        let back = model.inverse_rows(&model.transform_rows(&sh.corpus).unwrap()).unwrap();
        for (a, b) in sh.corpus.rows().zip(back.rows()) {
            let err = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let nrm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_rt = worst_rt.max(err / nrm);
        }
    }
    let c = sh.model.components();
    let mut worst_orth: f64 = 0.0;
    for i in 0..c.nrows() {
        for j in 0..=i {
            let dot: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst_orth = worst_orth.max((dot - target).abs());
        }
    }
    let samples = sample_feature_vectors(&sh.model, &sh.latent, 50_000, RngState::new(SEED, 40)).unwrap();
    let cs = covariance(&samples);
    let cc = covariance(&sh.corpus);
    let cov_rel = (&cs - &cc).norm() / cc.norm();
    ensure(
        worst_rt < 1e-6 && worst_orth < 1e-8 && cov_rel < 0.10,
        format!(
            "round trip max rel. error {worst_rt:.2e} (limit 1e-6); orthonormality max deviation {worst_orth:.2e} (limit 1e-8); covariance Frobenius rel. error {cov_rel:.4} at 50k draws (limit 0.10)"
        ),
    )
}

fn eer_brute_force(gen: &[f64], imp: &[f64]) -> (f64, f64) {
    let mut all: Vec<f64> = gen.iter().chain(imp).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (ng, ni) = (gen.len() as i128, imp.len() as i128);
    let mut best: Option<(i128, f64, f64)> = None;
    for w in all.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let fa = imp.iter().filter(|&&s| s >= t).count() as i128;
        let fr = gen.iter().filter(|&&s| s < t).count() as i128;
        let gap = (fa * ng - fr * ni).abs();
        if best.is_none_or(|(bg, bt, _)| gap < bg || (gap == bg && t < bt)) {
            best = Some((gap, t, (fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0));
        }
    }
    let (_, t, e) = best.unwrap();
    (e, t)
}

/// `ids` tight clusters of `per` rows around random centers.
fn planted_groups(ids: usize, per: usize, d: usize, seed: u64) -> Vec<(String, RowMatrix)> {
    let mut g = RngState::new(seed, 0).rng();
    (0..ids)
        .map(|k| {
            let c = unit(&gaussian_rows(1, d, &mut g));
            let mut m = RowMatrix::with_cols(d);
            for _ in 0..per {
                let row: Vec<f64> = c.iter().map(|a| a + 0.02 * normal(&mut g)).collect();
                m.push_row(&row).unwrap();
            }
            (k.to_string(), m)
        })
        .collect()
}

fn qa_criteria(sh: &mut Shared) -> Verdict {
    let mut eer_ok = 0;
    for s in 0..100u64 {
        let mut g = RngState::new(SEED, 200 + s).rng();
        let ng = g.random_range(1..60);
        let ni = g.random_range(1..80);
        let coarse = s % 2 == 0;
        let mut draw = |shift: f64| -> f64 {
            if coarse {
                g.random_range(0..40) as f64 / 40.0 + shift
            } else {
                g.random_range(-1.0..1.0) + shift
            }
        };
        let gen: Vec<f64> = (0..ng).map(|_| draw(0.2)).collect();
        let imp: Vec<f64> = (0..ni).map(|_| draw(0.0)).collect();
        if gen.len() + imp.len() < 2 {
            continue;
        }
        let got = equal_error_rate(&gen, &imp).unwrap();
        let want = eer_brute_force(&gen, &imp);
        if got.0.to_bits() == want.0.to_bits() && got.1.to_bits() == want.1.to_bits() {
            eer_ok += 1;
        }
    }

    // 100 identities x 20 images, one planted outlier in each of the first
    // 20 identities: rate 20 / 2000 = 0.01
    let mut groups = planted_groups(100, 20, 128, SEED);
    let mut g = RngState::new(SEED, 300).rng();
    for (_, m) in groups.iter_mut().take(20) {
        m.row_mut(0).copy_from_slice(&gaussian_rows(1, 128, &mut g));
    }
    let ds = DatasetEmbeddings::new(groups).unwrap();
    let (outliers, outlier_rate) = intra_class_outliers(&ds, 0.3);

    // 200 identities with one planted duplicate pair: 1 / 200 = 0.005
    let mut groups = planted_groups(200, 5, 128, SEED + 1);
    let dup = groups[17].1.clone();
    groups[123].1 = dup;
    let ds = DatasetEmbeddings::new(groups).unwrap();
    let merges = inter_class_merge_pairs(&ds, 0.7).unwrap();
    let merge_rate = merges.len() as f64 / ds.identity_count() as f64;
    let merge_exact = merges.len() == 1 && {
        let mut p = [merges[0].label_a.as_str(), merges[0].label_b.as_str()];
        p.sort();
        p == ["123", "17"]
    };

    // 1000 synthetic rows, 5 planted copies of reference rows: 0.005
    let mut g = RngState::new(SEED, 301).rng();
    let reference = RowMatrix::from_vec(300, 128, gaussian_rows(300, 128, &mut g)).unwrap();
    let mut synth = RowMatrix::from_vec(1000, 128, gaussian_rows(1000, 128, &mut g)).unwrap();
    let planted = [3usize, 250, 251, 600, 999];
    for (k, &i) in planted.iter().enumerate() {
        let r: Vec<f64> = reference.row(k * 50).iter().map(|x| x * 2.0).collect();
        synth.row_mut(i).copy_from_slice(&r);
    }
    let (leak_rate, leak_idx) = identity_leakage_rate(&synth, &reference, 0.7).unwrap();

    let sep = separability_count(&sh.pool_10k, 0.4);

    ensure(
        eer_ok == 100
            && outliers == 20
            && outlier_rate == 0.01
            && merge_exact
            && merge_rate == 0.005
            && leak_rate == 0.005
            && leak_idx == planted
            && sep == sh.pool_10k.nrows(),
        format!(
            "EER exact on {eer_ok}/100 sets; outlier rate {outlier_rate} ({outliers}/2000, planted 0.01); merge pairs {} -> {merge_rate} (planted 0.005); leakage {leak_rate} at {leak_idx:?} (planted 0.005); separability_count(0.4) {sep}/{} on sampler output",
            merges.len(),
            sh.pool_10k.nrows()
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(_: &mut Shared) -> Verdict {
    let mut cfg = PipelineConfig::new(SEED);
    cfg.sampler.n = 64;
    cfg.perturb.images_per_id = 10;
    cfg.attrop.replace = vec![
        Replacement {
            count: 4,
            target_pose: 60.0,
        },
        Replacement {
            count: 2,
            target_pose: 85.0,
        },
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut times = Vec::new();
    let mut manifests = Vec::new();
    for dir in [a.path(), b.path()] {
        let started = Instant::now();
        let out = run_pipeline(&cfg, dir, &RunOptions::default()).unwrap();
        times.push(started.elapsed().as_secs_f64());
        manifests.push(out.manifest.unwrap());
    }
    let m = &manifests[0];
    let shape_ok = m.identities.len() == 64
        && m.identities.iter().all(|r| r.images.len() == 10 && r.attrop.len() == 6);
    let ta = read_tree(a.path());
    let tb = read_tree(b.path());
    let images = ta.iter().filter(|(p, _)| p.ends_with(".pgm")).count();
    let vectors = ta.iter().filter(|(p, _)| p.ends_with(".idv")).count();
    let identical = ta == tb;
    ensure(
        identical && shape_ok && times.iter().all(|&t| t <= 60.0),
        format!(
            "two runs byte-identical: {identical} ({} files: manifest, {vectors} vector files, {images} images); 64 ids x 10 images with 6 attrop replacements each: {shape_ok}; runtimes {:.1}s / {:.1}s (limit 60s)",
            ta.len(),
            times[0],
            times[1]
        ),
    )
}

const FAKE_ARGS: &str = "while [ $# -gt 0 ]; do case \"$1\" in --in) in=\"$2\"; shift 2;; --out) out=\"$2\"; shift 2;; *) shift;; esac; done\n";

fn fake_adapter(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("#!/bin/sh\n{FAKE_ARGS}{body}")).unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p.to_string_lossy().into_owned()
}

fn formats(_: &mut Shared) -> Verdict {
    let mut g = RngState::new(SEED, 500).rng();
    let mut idv_ok = true;
    for (n, d) in [(0usize, 3usize), (1, 1), (37, 512)] {
        let mut vals: Vec<f64> = (0..n * d).map(|_| f64::from(g.random::<f32>() * 2.0 - 1.0)).collect();
        if let Some(v) = vals.first_mut() {
            *v = -0.0;
        }
        if vals.len() > 2 {
            vals[1] = f64::from(f32::MIN_POSITIVE / 4.0);
            vals[2] = f64::from(f32::MAX);
        }
        let m = RowMatrix::from_vec(n, d, vals).unwrap();
        let meta = serde_json::json!({"n": n, "note": "round trip"});
        let bytes = encode_idv(&m, Some(&meta)).unwrap();
        let back = decode_idv(&bytes, Path::new("mem")).unwrap();
        let same_bits = back.vectors.as_slice().iter().map(|x| x.to_bits()).eq(m.as_slice().iter().map(|x| x.to_bits()));
        idv_ok &= same_bits
            && back.vectors.nrows() == n
            && back.metadata.as_ref() == Some(&meta)
            && encode_idv(&back.vectors, back.metadata.as_ref()).unwrap() == bytes;
    }
    let mut pnm_ok = true;
    for (h, w, c) in [(1usize, 1usize, 1usize), (24, 24, 1), (7, 5, 3)] {
        let px: Vec<f64> = (0..h * w * c).map(|_| g.random_range(0..256) as f64 / 255.0).collect();
        let img = Image::new(h, w, c, px).unwrap();
        let bytes = encode_pnm(&img);
        let back = decode_pnm(&bytes, Path::new("mem")).unwrap();
        pnm_ok &= back == img && encode_pnm(&back) == bytes;
    }

    let tmp = tempfile::tempdir().unwrap();
    let echo = fake_adapter(tmp.path(), "echo.sh", "cp \"$in\" \"$out/out.idv\"\n");
    let images = fake_adapter(
        tmp.path(),
        "img.sh",
        "n=$(od -An -tu4 -j4 -N4 \"$in\" | tr -d ' ')\nk=0\nwhile [ \"$k\" -lt \"$n\" ]; do printf 'P5\\n1 1\\n255\\n' > \"$out/img_$k.pgm\"; printf \"\\\\$(printf '%03o' \"$k\")\" >> \"$out/img_$k.pgm\"; k=$((k + 1)); done\n",
    );
    let fail = fake_adapter(tmp.path(), "fail.sh", "echo broken >&2\nexit 3\n");
    let v = RowMatrix::from_vec(9, 4, (0..36).map(|i| i as f64 / 8.0).collect()).unwrap();
    let work = tmp.path().join("work");
    let cfg = |cmd: &str, mode| BridgeConfig {
        batch_size: 4,
        timeout_seconds: 30,
        ..BridgeConfig::new(cmd, &work, mode)
    };
    let echo_ok = matches!(bridge_generate(&cfg(&echo, BridgeMode::Embeddings), &v), Ok(BridgeOutput::Embeddings(e)) if e == v);
    let order_ok = match bridge_generate(&cfg(&images, BridgeMode::Images), &v) {
        Ok(BridgeOutput::Images(ims)) => {
            let firsts: Vec<u8> = ims.iter().map(|im| (im.pixels()[0] * 255.0).round() as u8).collect();
            firsts == [0, 1, 2, 3, 0, 1, 2, 3, 0]
        }
        _ => false,
    };
    let fail_ok = matches!(
        bridge_generate(&cfg(&fail, BridgeMode::Images), &v),
        Err(idforge_core::Error::Bridge(idforge_core::BridgeError::NonZeroExit { code: Some(3), ref stderr })) if stderr.contains("broken")
    );
    let file = tmp.path().join("v.idv");
    write_idv(&file, &v, None).unwrap();
    let file_ok = read_idv(&file).unwrap().vectors == v;
    ensure(
        idv_ok && pnm_ok && echo_ok && order_ok && fail_ok && file_ok,
        format!(
            "IDV1 bitwise round trip: {}; PGM/PPM bitwise round trip: {pnm_ok}; fake adapter echo: {echo_ok}, batch order: {order_ok}, nonzero exit with stderr: {fail_ok}",
            idv_ok && file_ok
        ),
    )
}

fn main() {
    let started = Instant::now();
    println!("acceptance suite ({} worker thread(s))", rayon::current_num_threads());
    let corpus = synthetic_corpus(&CorpusSpec::default(), RngState::new(SEED, 0)).unwrap();
    let model = pca_fit(&corpus, corpus.ncols(), PcaOptions::default()).unwrap();
    let latent = latent_gaussian_fit(&model, &corpus).unwrap();
    let (pool_10k, _, _) = sample_pool(&model, &latent, 10_000);
    let mut shared = Shared {
        corpus,
        model,
        latent,
        pool_10k,
        pool_100k: None,
    };

    type Criterion = fn(&mut Shared) -> Verdict;
    let criteria: [(&str, Criterion); 9] = [
        ("sampler separation", sampler_separation),
        ("rejection rate", rejection_rate),
        ("perturbation constraint", perturbation_constraint),
        ("noise convention", noise_oracle),
        ("attrop", attrop_criteria),
        ("pca", pca_criteria),
        ("qa oracles", qa_criteria),
        ("determinism", determinism),
        ("formats", formats),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS  {name:<24} {detail}  [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {detail}  [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

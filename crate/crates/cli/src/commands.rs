use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;

use idforge_core::attrop::measure_vector;
use idforge_core::format::{encode_idv, read_idv, read_model, write_atomic, write_idv, write_json, write_model};
use idforge_core::genbridge::{bridge_generate, read_pnm, write_pnm, BridgeOutput};
use idforge_core::idsampler::sample_identity_vectors;
use idforge_core::pipeline::{adjust_variant, file_stem, fit_models, label, run_pipeline, toy_models, RunOptions};
use idforge_core::qa::{audit as run_audit, identity_leakage_rate, AuditOptions, DatasetEmbeddings};
use idforge_core::{
    AttrOpConfig, BridgeConfig, BridgeMode, DatasetManifest, Error, GradMode, PerturbSpec, PipelineConfig,
    QaThresholds, Result, RngState, RowMatrix,
};

use crate::{
    AttrOpArgs, AuditArgs, FitPcaArgs, GenerateArgs, GradArg, LeakageArgs, ModeArg, PerturbArgs, RunArgs,
    SampleIdsArgs, ToyArgs,
};

fn toy_config(seed: u64, height: usize, width: usize, gain: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(seed);
    cfg.generator.height = height;
    cfg.generator.width = width;
    cfg.generator.gain = gain;
    cfg
}

fn stdout_bytes(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("writing stdout", e))
}

pub fn fit_pca(a: FitPcaArgs) -> Result<()> {
    let mut cfg = PipelineConfig::new(a.seed);
    cfg.corpus.path = a.corpus;
    if let Some(c) = a.count {
        cfg.corpus.synthetic.count = c;
    }
    if let Some(d) = a.dim {
        cfg.corpus.synthetic.dim = d;
    }
    cfg.pca.k = a.k;
    cfg.pca.whiten = a.whiten;
    let (model, latent) = fit_models(&cfg)?;
    write_model(&a.out, &model, Some(&latent))?;
    let explained: f64 = model.explained_variance().iter().sum();
    println!(
        "{}",
        json!({"dim": model.dim(), "k": model.k(), "explained_variance": explained, "out": a.out})
    );
    Ok(())
}

pub fn sample_ids(a: SampleIdsArgs) -> Result<()> {
    let (model, latent) = match &a.model {
        Some(p) => {
            let (m, l) = read_model(p)?;
            let l = l.ok_or_else(|| Error::Data(format!("{} carries no latent gaussian", p.display())))?;
            (m, l)
        }
        None => fit_models(&PipelineConfig::new(a.seed))?,
    };
    let mut scfg = idforge_core::SamplerConfig::new(a.n, a.seed);
    scfg.tau = a.tau;
    scfg.candidate_batch = a.batch;
    if let Some(m) = a.max_candidates {
        scfg.max_candidates = m;
    }
    scfg.normalize = a.normalize;
    let (pool, stats) = sample_identity_vectors(&scfg, &model, &latent, RngState::new(a.seed, 0x20))?;
    log::info!("sampling took {:.2}s", stats.wall_time_seconds);
    let meta = json!({
        "accepted": stats.accepted,
        "rejected": stats.rejected,
        "rejection_rate": stats.rejection_rate,
        "tau": stats.tau,
        "seed": stats.seed,
    });
    match &a.out {
        Some(p) => write_idv(p, pool.vectors(), Some(&meta))?,
        None => stdout_bytes(&encode_idv(pool.vectors(), Some(&meta))?)?,
    }
    if let Some(p) = &a.stats {
        write_json(p, &stats)?;
    }
    if a.out.is_some() {
        println!("{meta}");
    }
    Ok(())
}

fn parse_mixture(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|part| {
            let (s, f) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("mixture entry `{part}` is not sigma:fraction")))?;
            let num = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("mixture entry `{part}` is not numeric")))
            };
            Ok((num(s)?, num(f)?))
        })
        .collect()
}

pub fn perturb(a: PerturbArgs) -> Result<()> {
    let ids = read_idv(&a.ids)?.vectors;
    let spec = PerturbSpec {
        images_per_id: a.m,
        s_min: a.s_min,
        sigma_is_std: a.sigma_is_std,
        normalize_input: a.normalize_input,
        ..PerturbSpec::with_mixture(&parse_mixture(&a.mixture)?)
    };
    let sets = idforge_core::perturb::perturb_all(&ids, &spec, RngState::new(a.seed, 0x30))?;
    let mut min_sim = f64::INFINITY;
    for (i, set) in sets.iter().enumerate() {
        let stem = a.out_dir.join(file_stem(i));
        write_idv(&stem.with_extension("idv"), &set.variants, None)?;
        write_json(
            &stem.with_extension("json"),
            &json!({"sigmas": set.sigmas, "similarities": set.similarities}),
        )?;
        min_sim = set.similarities.iter().copied().fold(min_sim, f64::min);
    }
    println!("{}", json!({"identities": sets.len(), "images_per_id": a.m, "min_similarity": min_sim}));
    Ok(())
}

fn attrop_config(a: &AttrOpArgs) -> AttrOpConfig {
    AttrOpConfig {
        target_quality: a.target_quality,
        target_pose: a.target_pose,
        iterations: a.iterations,
        step_size: a.step_size,
        grad_mode: match a.grad_mode {
            GradArg::Analytic => GradMode::Analytic,
            GradArg::FiniteDifference => GradMode::FiniteDifference,
        },
        fd_step: a.fd_step,
        grad_clip: a.grad_clip,
        backtracking: !a.no_backtracking,
        hinge_quality: a.hinge_quality,
        ..AttrOpConfig::default()
    }
}

pub fn attrop(a: AttrOpArgs) -> Result<()> {
    let vectors = read_idv(&a.vectors)?.vectors;
    let ids = read_idv(&a.ids)?.vectors;
    if ids.nrows() != 1 && ids.nrows() != vectors.nrows() {
        return Err(Error::Shape(format!(
            "{} identity rows for {} vectors; give one or one per vector",
            ids.nrows(),
            vectors.nrows()
        )));
    }
    let ToyArgs {
        seed,
        height,
        width,
        gain,
    } = a.toy;
    let cfg = toy_config(seed, height, width, gain);
    let (generator, evaluators) = toy_models(&cfg, vectors.ncols())?;
    let opt = attrop_config(&a);
    let mut out = RowMatrix::with_cols(vectors.ncols());
    let mut trace_text = String::new();
    let mut poses = Vec::with_capacity(vectors.nrows());
    for (r, v) in vectors.rows().enumerate() {
        let v_id = ids.row(if ids.nrows() == 1 { 0 } else { r });
        let (adjusted, trace) = adjust_variant(v_id, v, generator.as_ref(), &evaluators, &opt)?;
        for rec in &trace.records {
            let mut line = serde_json::to_value(rec).expect("trace record serializes");
            line["row"] = json!(r);
            trace_text.push_str(&line.to_string());
            trace_text.push('\n');
        }
        poses.push(measure_vector(&adjusted, v_id, generator.as_ref(), &evaluators)?.0);
        out.push_row(&adjusted)?;
    }
    write_idv(&a.out, &out, None)?;
    if let Some(p) = &a.trace {
        write_atomic(p, trace_text.as_bytes())?;
    }
    println!("{}", json!({"rows": out.nrows(), "final_poses": poses}));
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let vectors = read_idv(&a.vectors)?.vectors;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(format!("creating {}", a.out_dir.display()), e))?;
    let img_path = |j: usize, channels: usize| {
        a.out_dir
            .join(format!("img_{j:03}.{}", if channels == 1 { "pgm" } else { "ppm" }))
    };
    let written = match &a.bridge {
        None => {
            let cfg = toy_config(a.seed, a.height, a.width, a.gain);
            let (generator, _) = toy_models(&cfg, vectors.ncols())?;
            let mut emb = RowMatrix::with_cols(vectors.ncols());
            for (j, v) in vectors.rows().enumerate() {
                let img = generator.generate(v)?;
                let path = img_path(j, img.channels());
                write_pnm(&path, &img)?;
                emb.push_row(&generator.embed(&read_pnm(&path)?)?)?;
            }
            write_idv(&a.out_dir.join("embeddings.idv"), &emb, None)?;
            vectors.nrows()
        }
        Some(command) => {
            let cfg = BridgeConfig {
                command: command.clone(),
                work_dir: a.work_dir.clone().unwrap_or_else(|| a.out_dir.join("bridge")),
                batch_size: a.batch_size,
                timeout_seconds: a.timeout,
                mode: match a.mode {
                    ModeArg::Images => BridgeMode::Images,
                    ModeArg::Embeddings => BridgeMode::Embeddings,
                },
            };
            match bridge_generate(&cfg, &vectors)? {
                BridgeOutput::Images(images) => {
                    for (j, img) in images.iter().enumerate() {
                        write_pnm(&img_path(j, img.channels()), img)?;
                    }
                    images.len()
                }
                BridgeOutput::Embeddings(e) => {
                    write_idv(&a.out_dir.join("embeddings.idv"), &e, None)?;
                    e.nrows()
                }
            }
        }
    };
    println!("{}", json!({"outputs": written, "out_dir": a.out_dir}));
    Ok(())
}

fn thresholds(a: &AuditArgs) -> QaThresholds {
    QaThresholds {
        outlier: a.thresholds.outlier,
        merge: a.thresholds.merge,
        separability: a.thresholds.separability,
        leakage: a.thresholds.leakage,
    }
}

fn manifest_dataset(path: &Path) -> Result<(DatasetEmbeddings, RowMatrix)> {
    let manifest = DatasetManifest::read(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for f in manifest.referenced_files() {
        if !dir.join(&f).is_file() {
            return Err(Error::Data(format!("manifest references missing file {f}")));
        }
    }
    let groups = manifest
        .identities
        .iter()
        .map(|r| Ok((r.label.clone(), read_idv(&dir.join(&r.embeddings_file))?.vectors)))
        .collect::<Result<Vec<_>>>()?;
    let mut ids = RowMatrix::with_cols(0);
    let mut cache: Option<(String, RowMatrix)> = None;
    for r in &manifest.identities {
        if cache.as_ref().map(|c| &c.0) != Some(&r.id_vector_file) {
            cache = Some((r.id_vector_file.clone(), read_idv(&dir.join(&r.id_vector_file))?.vectors));
        }
        let m = &cache.as_ref().expect("cached").1;
        if r.id_vector_row >= m.nrows() {
            return Err(Error::Index {
                index: r.id_vector_row,
                dim: m.nrows(),
            });
        }
        if ids.ncols() == 0 {
            ids = RowMatrix::with_cols(m.ncols());
        }
        ids.push_row(m.row(r.id_vector_row))?;
    }
    Ok((DatasetEmbeddings::new(groups)?, ids))
}

pub fn audit(a: AuditArgs) -> Result<()> {
    let (ds, ids) = match (&a.manifest, &a.ids) {
        (Some(m), _) => manifest_dataset(m)?,
        (None, Some(p)) => {
            let ids = read_idv(p)?.vectors;
            let groups = ids
                .rows()
                .enumerate()
                .map(|(i, r)| Ok((label(i), RowMatrix::from_rows(&[r])?)))
                .collect::<Result<Vec<_>>>()?;
            (DatasetEmbeddings::new(groups)?, ids)
        }
        (None, None) => return Err(Error::Config("audit needs --manifest or --ids".into())),
    };
    let reference = match &a.reference {
        Some(p) => Some(read_idv(p)?.vectors),
        None => None,
    };
    let opts = AuditOptions {
        thresholds: thresholds(&a),
        impostor_sample: a.impostor_sample,
        ..AuditOptions::new(a.seed)
    };
    let report = run_audit(&ds, Some(&ids), reference.as_ref(), &opts)?;
    if let Some(p) = &a.out {
        write_atomic(p, report.to_json().as_bytes())?;
    }
    if let Some(p) = &a.histograms {
        write_atomic(p, report.histogram_csv().as_bytes())?;
    }
    if a.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.summary());
    }
    Ok(())
}

pub fn leakage(a: LeakageArgs) -> Result<()> {
    if !(a.threshold > -1.0 && a.threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (-1, 1), got {}", a.threshold)));
    }
    let synth = read_idv(&a.synthetic)?.vectors;
    let reference = read_idv(&a.reference)?.vectors;
    let (rate, indices) = identity_leakage_rate(&synth, &reference, a.threshold)?;
    println!(
        "{}",
        json!({"rate": rate, "count": indices.len(), "total": synth.nrows(), "threshold": a.threshold, "indices": indices})
    );
    Ok(())
}

pub fn run(a: RunArgs) -> Result<()> {
    let cfg = PipelineConfig::from_file(&a.config, &a.set)?;
    let opts = RunOptions {
        stop_after: a.stop_after,
        fresh: a.fresh,
    };
    let outcome = run_pipeline(&cfg, &a.out, &opts)?;
    let images = outcome
        .manifest
        .as_ref()
        .map(|m| m.identities.iter().map(|r| r.images.len()).sum::<usize>());
    println!(
        "{}",
        json!({
            "completed": outcome.completed,
            "identities": outcome.manifest.as_ref().map(|m| m.identities.len()),
            "images": images,
            "out": a.out,
        })
    );
    Ok(())
}

//! End-to-end dataset run: fit, sample-ids, perturb, attrop, generate, audit.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so a run can resume after the last completed stage. The
//! manifest is written last; its presence marks a finished dataset.

use std::fs;
use std::hash::Hasher;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fnv::FnvHasher;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attrop::{attrop_adjust, measure_vector, AttrOpConfig, AttrOpTrace, Evaluators};
use crate::corpus::{synthetic_corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::format::{read_idv, read_json, read_model, write_atomic, write_idv, write_json, write_model};
use crate::genbridge::{
    bridge_generate, read_pnm, write_pnm, BridgeConfig, BridgeMode, BridgeOutput, Generator, Image, PoseSurrogate,
    QualitySurrogate, ToyGenerator, DEFAULT_GAIN,
};
use crate::idsampler::{sample_identity_vectors, SamplerConfig};
use crate::numkit::{norm, RngState, RowMatrix};
use crate::pca::{latent_gaussian_fit, pca_fit, LatentGaussian, PcaModel, PcaOptions};
use crate::perturb::{perturb_all, PerturbSpec};
use crate::qa::{audit, AuditOptions, DatasetEmbeddings, QaThresholds, DEFAULT_IMPOSTOR_SAMPLE};

pub const STAGES: [&str; 6] = ["fit", "sample-ids", "perturb", "attrop", "generate", "audit"];
pub const MANIFEST_FORMAT: &str = "idforge-manifest/1";

const STREAM_CORPUS: u64 = 0x10;
const STREAM_SAMPLER: u64 = 0x20;
const STREAM_PERTURB: u64 = 0x30;
const STREAM_ATTROP: u64 = 0x40;
const STREAM_POSE_AXIS: u64 = 0x41;

const MODEL_FILE: &str = "model.idfm";
const IDS_FILE: &str = "ids.idv";
const REPORT_FILE: &str = "report.json";
const HISTOGRAM_FILE: &str = "histograms.csv";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const MANIFEST_FILE: &str = "manifest.jsonl";
const LOCK_FILE: &str = ".lock";
const OWNED: [&str; 11] = [
    MODEL_FILE,
    IDS_FILE,
    "variants",
    "attrop",
    "images",
    "embeddings",
    "bridge",
    REPORT_FILE,
    HISTOGRAM_FILE,
    CHECKPOINT_FILE,
    MANIFEST_FILE,
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// IDV1 file of corpus features; the synthetic corpus is used when absent.
    pub path: Option<PathBuf>,
    pub synthetic: CorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSection {
    /// Retained components; all of them when absent.
    pub k: Option<usize>,
    pub whiten: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub n: usize,
    pub tau: f64,
    pub candidate_batch: usize,
    /// Defaults to `max(4n, 1024)`.
    pub max_candidates: Option<usize>,
    pub normalize: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n: 1000,
            tau: 0.3,
            candidate_batch: 4096,
            max_candidates: None,
            normalize: false,
        }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let mut cfg = SamplerConfig::new(self.n, seed);
        cfg.tau = self.tau;
        cfg.candidate_batch = self.candidate_batch;
        if let Some(m) = self.max_candidates {
            cfg.max_candidates = m;
        }
        cfg.normalize = self.normalize;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replacement {
    pub count: usize,
    pub target_pose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttrOpSection {
    pub enabled: bool,
    /// Variants replaced per identity, grouped by target pose.
    pub replace: Vec<Replacement>,
    pub quality_offset: f64,
    pub quality_scale: f64,
    pub optimizer: AttrOpConfig,
}

impl Default for AttrOpSection {
    fn default() -> Self {
        AttrOpSection {
            enabled: true,
            replace: vec![
                Replacement {
                    count: 20,
                    target_pose: 60.0,
                },
                Replacement {
                    count: 10,
                    target_pose: 85.0,
                },
            ],
            quality_offset: 0.0,
            quality_scale: 27.0,
            optimizer: AttrOpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    #[default]
    Toy,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub command: String,
    /// Defaults to `<out_dir>/bridge`.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    #[serde(default = "default_bridge_batch")]
    pub batch_size: usize,
    #[serde(default = "default_bridge_timeout")]
    pub timeout_seconds: u64,
    #[serde(default)]
    pub mode: BridgeMode,
}

fn default_bridge_batch() -> usize {
    64
}

fn default_bridge_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub height: usize,
    pub width: usize,
    pub gain: f64,
    pub bridge: Option<BridgeSection>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            kind: GeneratorKind::Toy,
            height: 24,
            width: 24,
            gain: DEFAULT_GAIN,
            bridge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub thresholds: QaThresholds,
    pub impostor_sample: usize,
    /// IDV1 file of real-identity embeddings for the leakage scan.
    pub reference: Option<PathBuf>,
}

impl Default for QaSection {
    fn default() -> Self {
        QaSection {
            thresholds: QaThresholds::default(),
            impostor_sample: DEFAULT_IMPOSTOR_SAMPLE,
            reference: None,
        }
    }
}

/// Full run configuration. Only `seed` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// When given, must equal `sampler.n * perturb.images_per_id`.
    #[serde(default)]
    pub dataset_size: Option<usize>,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub pca: PcaSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub perturb: PerturbSpec,
    #[serde(default)]
    pub attrop: AttrOpSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub qa: QaSection,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            seed,
            dataset_size: None,
            corpus: CorpusSection::default(),
            pca: PcaSection::default(),
            sampler: SamplerSection::default(),
            perturb: PerturbSpec::default(),
            attrop: AttrOpSection::default(),
            generator: GeneratorSection::default(),
            qa: QaSection::default(),
        }
    }

    /// Parses TOML and applies `key.path=value` overrides in order.
    pub fn from_toml<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        PipelineConfig::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.sampler_config(self.seed).validate()?;
        self.perturb.validate()?;
        self.qa.thresholds.validate()?;
        if self.corpus.path.is_none() {
            self.corpus.synthetic.validate()?;
        }
        if self.qa.impostor_sample == 0 {
            return Err(Error::Config("qa.impostor_sample must be >= 1".into()));
        }
        let total = self.sampler.n.checked_mul(self.perturb.images_per_id);
        if let Some(size) = self.dataset_size {
            if total != Some(size) {
                return Err(Error::Config(format!(
                    "dataset_size {size} differs from n * images_per_id = {} * {}",
                    self.sampler.n, self.perturb.images_per_id
                )));
            }
        }
        if self.attrop.enabled {
            self.attrop.optimizer.validate()?;
            if self.generator.kind == GeneratorKind::Bridge {
                return Err(Error::Config(
                    "attrop needs a differentiable generator; disable attrop with a bridge generator".into(),
                ));
            }
            let replaced: usize = self.attrop.replace.iter().map(|r| r.count).sum();
            if replaced > self.perturb.images_per_id {
                return Err(Error::Config(format!(
                    "attrop replaces {replaced} variants but only {} exist per identity",
                    self.perturb.images_per_id
                )));
            }
            if self.attrop.replace.iter().any(|r| !r.target_pose.is_finite()) {
                return Err(Error::Config("attrop target poses must be finite".into()));
            }
        }
        match self.generator.kind {
            GeneratorKind::Toy => {
                if self.generator.height == 0 || self.generator.width == 0 || !(self.generator.gain > 0.0) {
                    return Err(Error::Config("toy generator needs positive height, width and gain".into()));
                }
            }
            GeneratorKind::Bridge => {
                if self.generator.bridge.is_none() {
                    return Err(Error::Config("generator.kind = bridge needs a [generator.bridge] table".into()));
                }
            }
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = FnvHasher::default();
        h.write(text.as_bytes());
        format!("{:016x}", h.finish())
    }

    fn bridge_config(&self, out_dir: &Path) -> Result<BridgeConfig> {
        let b = self
            .generator
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("no bridge configured".into()))?;
        let cfg = BridgeConfig {
            command: b.command.clone(),
            work_dir: b.work_dir.clone().unwrap_or_else(|| out_dir.join("bridge")),
            batch_size: b.batch_size,
            timeout_seconds: b.timeout_seconds,
            mode: b.mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{seg}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub completed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    pub identities: usize,
    pub images_per_id: usize,
    pub stages: Vec<String>,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrOpRecord {
    pub variant: usize,
    pub target_pose: f64,
    pub final_pose: f64,
    pub identity_cosine: f64,
}

/// Per-identity provenance; paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub index: usize,
    pub label: String,
    pub id_vector_file: String,
    pub id_vector_row: usize,
    pub variants_file: String,
    pub sigmas: Vec<f64>,
    pub similarities: Vec<f64>,
    pub attrop: Vec<AttrOpRecord>,
    pub trace_file: Option<String>,
    pub final_vectors_file: String,
    pub images: Vec<String>,
    pub embeddings_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub identities: Vec<IdentityRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.identities {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| bad("empty manifest".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(bad(format!("unknown manifest format `{}`", header.format)));
        }
        let identities = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("record {i}: {e}"))))
            .collect::<Result<_>>()?;
        Ok(DatasetManifest { header, identities })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        DatasetManifest::from_jsonl(&text, path)
    }

    /// Every relative path the manifest points at.
    pub fn referenced_files(&self) -> Vec<String> {
        let mut files = vec![IDS_FILE.to_string()];
        for r in &self.identities {
            files.push(r.variants_file.clone());
            files.extend(r.trace_file.clone());
            files.push(r.final_vectors_file.clone());
            files.extend(r.images.iter().cloned());
            files.push(r.embeddings_file.clone());
        }
        files.sort();
        files.dedup();
        files
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Return after this stage completes, as if the process were killed.
    pub stop_after: Option<String>,
    /// Discard any previous run in the directory.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub completed: Vec<String>,
    /// Present once every stage has run.
    pub manifest: Option<DatasetManifest>,
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Identity labels are dense integers from 0.
pub fn label(i: usize) -> String {
    i.to_string()
}

/// File stem for identity `i`, zero-padded so listings sort by index.
pub fn file_stem(i: usize) -> String {
    format!("id_{i:06}")
}

fn variants_rel(i: usize) -> String {
    format!("variants/{}.idv", file_stem(i))
}

fn attrop_rel(i: usize) -> String {
    format!("attrop/{}.idv", file_stem(i))
}

fn trace_rel(i: usize) -> String {
    format!("attrop/{}.trace.jsonl", file_stem(i))
}

fn embeddings_rel(i: usize) -> String {
    format!("embeddings/{}.idv", file_stem(i))
}

fn image_rel(i: usize, j: usize, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("images/{}/img_{j:03}.{ext}", file_stem(i))
}

fn sidecar(rel: &str) -> String {
    format!("{}.json", rel.trim_end_matches(".idv"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VariantSidecar {
    sigmas: Vec<f64>,
    similarities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenerateSidecar {
    images: Vec<Vec<String>>,
}

/// Runs (or resumes) the pipeline in `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(s) = &opts.stop_after {
        if !STAGES.contains(&s.as_str()) {
            return Err(Error::Config(format!("unknown stage `{s}`; stages are {}", STAGES.join(", "))));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let _lock = RunLock::acquire(out_dir)?;
    if opts.fresh {
        for name in OWNED {
            let p = out_dir.join(name);
            let res = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            match res {
                Err(e) if e.kind() != ErrorKind::NotFound => {
                    return Err(Error::io(format!("removing {}", p.display()), e))
                }
                _ => {}
            }
        }
    }
    let hash = cfg.hash();
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let mut checkpoint = if ck_path.exists() {
        let ck: Checkpoint = read_json(&ck_path)?;
        if ck.config_hash != hash {
            return Err(Error::Config(format!(
                "{} holds a run with a different config (hash {}, now {hash}); rerun with fresh",
                out_dir.display(),
                ck.config_hash
            )));
        }
        ck
    } else {
        Checkpoint {
            config_hash: hash,
            completed: Vec::new(),
        }
    };

    for stage in STAGES {
        let done = checkpoint.completed.iter().any(|s| s == stage);
        if !done {
            let ran = run_stage(stage, cfg, out_dir).map_err(|e| Error::Stage {
                stage: stage.to_string(),
                completed: checkpoint.completed.last().cloned(),
                source: Box::new(e),
            })?;
            if ran {
                checkpoint.completed.push(stage.to_string());
                write_json(&ck_path, &checkpoint)?;
            }
        }
        if opts.stop_after.as_deref() == Some(stage) {
            return Ok(RunOutcome {
                completed: checkpoint.completed,
                manifest: None,
            });
        }
    }

    let manifest = build_manifest(cfg, out_dir, &checkpoint).map_err(|e| Error::Stage {
        stage: "manifest".into(),
        completed: checkpoint.completed.last().cloned(),
        source: Box::new(e),
    })?;
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_jsonl().as_bytes())?;
    Ok(RunOutcome {
        completed: checkpoint.completed,
        manifest: Some(manifest),
    })
}

/// Returns `false` for a stage the config disables.
fn run_stage(stage: &str, cfg: &PipelineConfig, dir: &Path) -> Result<bool> {
    let started = Instant::now();
    let ran = match stage {
        "fit" => stage_fit(cfg, dir).map(|_| true),
        "sample-ids" => stage_sample(cfg, dir).map(|_| true),
        "perturb" => stage_perturb(cfg, dir).map(|_| true),
        "attrop" => {
            if cfg.attrop.enabled {
                stage_attrop(cfg, dir).map(|_| true)
            } else {
                Ok(false)
            }
        }
        "generate" => stage_generate(cfg, dir).map(|_| true),
        "audit" => stage_audit(cfg, dir).map(|_| true),
        other => Err(Error::Config(format!("unknown stage `{other}`"))),
    }?;
    log::info!("stage {stage}: {} in {:.2}s", if ran { "done" } else { "skipped" }, started.elapsed().as_secs_f64());
    Ok(ran)
}

/// PCA and latent Gaussian for the configured corpus.
pub fn fit_models(cfg: &PipelineConfig) -> Result<(PcaModel, LatentGaussian)> {
    let corpus = match &cfg.corpus.path {
        Some(p) => read_idv(p)?.vectors,
        None => synthetic_corpus(&cfg.corpus.synthetic, RngState::new(cfg.seed, STREAM_CORPUS))?,
    };
    let k = cfg.pca.k.unwrap_or(corpus.ncols());
    let model = pca_fit(&corpus, k, PcaOptions { whiten: cfg.pca.whiten })?;
    let latent = latent_gaussian_fit(&model, &corpus)?;
    Ok((model, latent))
}

fn stage_fit(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (model, latent) = fit_models(cfg)?;
    write_model(&dir.join(MODEL_FILE), &model, Some(&latent))
}

fn stage_sample(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let (model, latent) = read_model(&dir.join(MODEL_FILE))?;
    let latent = latent.ok_or_else(|| Error::Data(format!("{MODEL_FILE} carries no latent gaussian")))?;
    let scfg = cfg.sampler.sampler_config(cfg.seed);
    let (pool, stats) = sample_identity_vectors(&scfg, &model, &latent, RngState::new(cfg.seed, STREAM_SAMPLER))?;
    log::info!(
        "sampled {} identities, rejection rate {:.4}, {:.1}s",
        stats.accepted,
        stats.rejection_rate,
        stats.wall_time_seconds
    );
    let meta = json!({
        "accepted": stats.accepted,
        "rejected": stats.rejected,
        "rejection_rate": stats.rejection_rate,
        "tau": stats.tau,
        "seed": stats.seed,
    });
    write_idv(&dir.join(IDS_FILE), pool.vectors(), Some(&meta))
}

fn read_ids(dir: &Path) -> Result<RowMatrix> {
    Ok(read_idv(&dir.join(IDS_FILE))?.vectors)
}

fn stage_perturb(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let ids = read_ids(dir)?;
    let sets = perturb_all(&ids, &cfg.perturb, RngState::new(cfg.seed, STREAM_PERTURB))?;
    sets.par_iter().enumerate().try_for_each(|(i, set)| {
        let rel = variants_rel(i);
        write_idv(&dir.join(&rel), &set.variants, None)?;
        write_json(
            &dir.join(sidecar(&rel)),
            &VariantSidecar {
                sigmas: set.sigmas.clone(),
                similarities: set.similarities.clone(),
            },
        )
    })
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > 0.0) {
        return Err(Error::Domain("cannot normalize a zero vector".into()));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// The toy generator and surrogate evaluators for a run.
pub fn toy_models(cfg: &PipelineConfig, dim: usize) -> Result<(Arc<ToyGenerator>, Evaluators)> {
    let g = &cfg.generator;
    let generator = Arc::new(ToyGenerator::new(dim, g.height, g.width, g.gain, cfg.seed)?);
    let mut rng = RngState::new(cfg.seed, STREAM_POSE_AXIS).rng();
    let axis: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let evaluators = Evaluators::new(
        Arc::new(PoseSurrogate::new(generator.clone(), &axis)?),
        Arc::new(QualitySurrogate::new(
            generator.clone(),
            cfg.attrop.quality_offset,
            cfg.attrop.quality_scale,
        )),
        generator.clone(),
    );
    Ok((generator, evaluators))
}

/// Variant indices to replace and their target poses; identity `i` draws
/// from `rng.derive(i)`.
fn replacement_plan(cfg: &PipelineConfig, i: usize) -> Vec<(usize, f64)> {
    let m = cfg.perturb.images_per_id;
    let total: usize = cfg.attrop.replace.iter().map(|r| r.count).sum();
    let mut rng = RngState::new(cfg.seed, STREAM_ATTROP).derive(i as u64).rng();
    let picks = sample_indices(&mut rng, m, total).into_vec();
    let mut plan = Vec::with_capacity(total);
    let mut it = picks.into_iter();
    for r in &cfg.attrop.replace {
        for j in it.by_ref().take(r.count) {
            plan.push((j, r.target_pose));
        }
    }
    plan.sort_by_key(|p| p.0);
    plan
}

/// AttrOP on the direction of `v_im`; the result keeps the norm of `v_im`.
/// `v_id` is normalized too. Trace hashes refer to the unit-norm iterates.
pub fn adjust_variant(
    v_id: &[f64],
    v_im: &[f64],
    generator: &dyn Generator,
    evaluators: &Evaluators,
    cfg: &AttrOpConfig,
) -> Result<(Vec<f64>, AttrOpTrace)> {
    let (v_id, _) = unit(v_id)?;
    let (start, scale) = unit(v_im)?;
    if cfg.iterations == 0 {
        let (_, trace) = attrop_adjust(&v_id, &start, generator, evaluators, cfg)?;
        return Ok((v_im.to_vec(), trace));
    }
    let (v, trace) = attrop_adjust(&v_id, &start, generator, evaluators, cfg)?;
    Ok((v.into_iter().map(|x| x * scale).collect(), trace))
}

fn stage_attrop(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let ids = read_ids(dir)?;
    let (generator, evaluators) = toy_models(cfg, ids.ncols())?;
    (0..ids.nrows()).into_par_iter().try_for_each(|i| {
        let mut variants = read_idv(&dir.join(variants_rel(i)))?.vectors;
        let (v_id, _) = unit(ids.row(i))?;
        let mut records = Vec::new();
        let mut trace_text = String::new();
        for (j, target) in replacement_plan(cfg, i) {
            let opt = AttrOpConfig {
                target_pose: target,
                ..cfg.attrop.optimizer.clone()
            };
            let (v, trace) = adjust_variant(&v_id, variants.row(j), generator.as_ref(), &evaluators, &opt)?;
            let (final_pose, identity_cosine) = measure_vector(&v, &v_id, generator.as_ref(), &evaluators)?;
            for r in &trace.records {
                let mut line = serde_json::to_value(r).expect("trace record serializes");
                line["variant"] = json!(j);
                line["target_pose"] = json!(target);
                trace_text.push_str(&line.to_string());
                trace_text.push('\n');
            }
            variants.row_mut(j).copy_from_slice(&v);
            records.push(AttrOpRecord {
                variant: j,
                target_pose: target,
                final_pose,
                identity_cosine,
            });
        }
        let rel = attrop_rel(i);
        write_atomic(&dir.join(trace_rel(i)), trace_text.as_bytes())?;
        write_json(&dir.join(sidecar(&rel)), &records)?;
        write_idv(&dir.join(&rel), &variants, None)
    })
}

fn final_vectors_rel(cfg: &PipelineConfig, i: usize) -> String {
    if cfg.attrop.enabled {
        attrop_rel(i)
    } else {
        variants_rel(i)
    }
}

const GENERATE_SIDECAR: &str = "images/index.json";

fn stage_generate(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let ids = read_ids(dir)?;
    let n = ids.nrows();
    let images = match cfg.generator.kind {
        GeneratorKind::Toy => {
            let (generator, _) = toy_models(cfg, ids.ncols())?;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let vectors = read_idv(&dir.join(final_vectors_rel(cfg, i)))?.vectors;
                    let mut paths = Vec::with_capacity(vectors.nrows());
                    let mut emb = RowMatrix::with_cols(vectors.ncols());
                    for (j, v) in vectors.rows().enumerate() {
                        let img = generator.generate(v)?;
                        let rel = image_rel(i, j, img.channels());
                        let path = dir.join(&rel);
                        write_pnm(&path, &img)?;
                        // embed what was stored, not the unquantized image
                        emb.push_row(&generator.embed(&read_pnm(&path)?)?)?;
                        paths.push(rel);
                    }
                    write_idv(&dir.join(embeddings_rel(i)), &emb, None)?;
                    Ok(paths)
                })
                .collect::<Result<Vec<_>>>()?
        }
        GeneratorKind::Bridge => bridge_generate_stage(cfg, dir, n)?,
    };
    write_json(&dir.join(GENERATE_SIDECAR), &GenerateSidecar { images })
}

fn bridge_generate_stage(cfg: &PipelineConfig, dir: &Path, n: usize) -> Result<Vec<Vec<String>>> {
    let bcfg = cfg.bridge_config(dir)?;
    let per_id: Vec<RowMatrix> = (0..n)
        .map(|i| Ok(read_idv(&dir.join(final_vectors_rel(cfg, i)))?.vectors))
        .collect::<Result<_>>()?;
    let mut all = RowMatrix::with_cols(per_id.first().map_or(0, |m| m.ncols()));
    for m in &per_id {
        for r in m.rows() {
            all.push_row(r)?;
        }
    }
    let out = bridge_generate(&bcfg, &all)?;
    let mut paths = Vec::with_capacity(n);
    let mut offset = 0;
    for (i, m) in per_id.iter().enumerate() {
        let rows: Vec<usize> = (offset..offset + m.nrows()).collect();
        offset += m.nrows();
        match &out {
            BridgeOutput::Images(images) => {
                let mut p = Vec::with_capacity(rows.len());
                for (j, &r) in rows.iter().enumerate() {
                    let img: &Image = &images[r];
                    let rel = image_rel(i, j, img.channels());
                    write_pnm(&dir.join(&rel), img)?;
                    p.push(rel);
                }
                // no face model on this side of the bridge: audit in vector space
                write_idv(&dir.join(embeddings_rel(i)), m, None)?;
                paths.push(p);
            }
            BridgeOutput::Embeddings(e) => {
                write_idv(&dir.join(embeddings_rel(i)), &e.select_rows(&rows), None)?;
                paths.push(Vec::new());
            }
        }
    }
    Ok(paths)
}

fn stage_audit(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let ids = read_ids(dir)?;
    let groups = (0..ids.nrows())
        .map(|i| Ok((label(i), read_idv(&dir.join(embeddings_rel(i)))?.vectors)))
        .collect::<Result<Vec<_>>>()?;
    let ds = DatasetEmbeddings::new(groups)?;
    let reference = match &cfg.qa.reference {
        Some(p) => Some(read_idv(p)?.vectors),
        None => None,
    };
    let opts = AuditOptions {
        thresholds: cfg.qa.thresholds,
        impostor_sample: cfg.qa.impostor_sample,
        ..AuditOptions::new(cfg.seed)
    };
    let report = audit(&ds, Some(&ids), reference.as_ref(), &opts)?;
    write_atomic(&dir.join(REPORT_FILE), report.to_json().as_bytes())?;
    write_atomic(&dir.join(HISTOGRAM_FILE), report.histogram_csv().as_bytes())
}

fn build_manifest(cfg: &PipelineConfig, dir: &Path, ck: &Checkpoint) -> Result<DatasetManifest> {
    let ids = read_ids(dir)?;
    let gen: GenerateSidecar = read_json(&dir.join(GENERATE_SIDECAR))?;
    let mut identities = Vec::with_capacity(ids.nrows());
    for i in 0..ids.nrows() {
        let v: VariantSidecar = read_json(&dir.join(sidecar(&variants_rel(i))))?;
        let attrop: Vec<AttrOpRecord> = if cfg.attrop.enabled {
            read_json(&dir.join(sidecar(&attrop_rel(i))))?
        } else {
            Vec::new()
        };
        identities.push(IdentityRecord {
            index: i,
            label: label(i),
            id_vector_file: IDS_FILE.into(),
            id_vector_row: i,
            variants_file: variants_rel(i),
            sigmas: v.sigmas,
            similarities: v.similarities,
            attrop,
            trace_file: cfg.attrop.enabled.then(|| trace_rel(i)),
            final_vectors_file: final_vectors_rel(cfg, i),
            images: gen.images.get(i).cloned().unwrap_or_default(),
            embeddings_file: embeddings_rel(i),
        });
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            seed: cfg.seed,
            config_hash: ck.config_hash.clone(),
            identities: ids.nrows(),
            images_per_id: cfg.perturb.images_per_id,
            stages: ck.completed.clone(),
            config: serde_json::to_value(cfg).expect("config serializes"),
        },
        identities,
    };
    for f in manifest.referenced_files() {
        if !dir.join(&f).is_file() {
            return Err(Error::Data(format!("manifest references missing file {f}")));
        }
    }
    Ok(manifest)
}

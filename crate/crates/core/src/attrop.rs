//! Attribute optimization: gradient descent on a perturbed vector so the
//! generated image hits target pose and quality while keeping its identity.

use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbridge::{Embedder, Generator, Image, ScalarEvaluator};
use crate::numkit::{cosine_similarity, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttrOpConfig {
    pub target_quality: f64,
    /// Degrees.
    pub target_pose: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub grad_mode: GradMode,
    pub fd_step: f64,
    pub grad_clip: f64,
    /// Halve the step (at most 4 times) when it would increase the loss.
    pub backtracking: bool,
    /// Use `max(0, Q − quality)` instead of the signed difference.
    pub hinge_quality: bool,
    /// Maximum generator evaluations spent on finite differences.
    pub fd_budget: usize,
}

impl Default for AttrOpConfig {
    fn default() -> Self {
        AttrOpConfig {
            target_quality: 27.0,
            target_pose: 60.0,
            iterations: 5,
            step_size: 0.05,
            grad_mode: GradMode::Analytic,
            fd_step: 1e-3,
            grad_clip: 1.0,
            backtracking: true,
            hinge_quality: false,
            fd_budget: 1_000_000,
        }
    }
}

impl AttrOpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config(format!("finite-difference step must be > 0, got {}", self.fd_step)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("gradient clip must be > 0, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Pose,
    Quality,
    Identity,
}

/// The pose, quality and face-recognition models the loss is built from.
#[derive(Clone, Default)]
pub struct Evaluators {
    pub pose: Option<Arc<dyn ScalarEvaluator>>,
    pub quality: Option<Arc<dyn ScalarEvaluator>>,
    pub identity: Option<Arc<dyn Embedder>>,
}

impl Evaluators {
    pub fn new(
        pose: Arc<dyn ScalarEvaluator>,
        quality: Arc<dyn ScalarEvaluator>,
        identity: Arc<dyn Embedder>,
    ) -> Self {
        Evaluators {
            pose: Some(pose),
            quality: Some(quality),
            identity: Some(identity),
        }
    }

    fn parts(&self) -> Result<(&dyn ScalarEvaluator, &dyn ScalarEvaluator, &dyn Embedder)> {
        let missing = |k: EvaluatorKind| Error::Config(format!("no {k:?} evaluator configured"));
        Ok((
            self.pose.as_deref().ok_or_else(|| missing(EvaluatorKind::Pose))?,
            self.quality.as_deref().ok_or_else(|| missing(EvaluatorKind::Quality))?,
            self.identity.as_deref().ok_or_else(|| missing(EvaluatorKind::Identity))?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub id: f64,
    pub quality: f64,
    pub pose: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.id + self.quality + self.pose
    }
}

/// Raw measurements the loss terms are computed from.
struct Measured {
    embedding: Vec<f64>,
    quality: f64,
    pose: f64,
}

fn measure(image: &Image, v_id: &[f64], evaluators: &Evaluators) -> Result<(Measured, f64)> {
    let (pose, quality, identity) = evaluators.parts()?;
    let embedding = identity.embed(image)?;
    let cos = cosine_similarity(&embedding, v_id)?;
    Ok((
        Measured {
            embedding,
            quality: quality.value(image)?,
            pose: pose.value(image)?,
        },
        cos,
    ))
}

fn terms_from(m: &Measured, cos: f64, cfg: &AttrOpConfig) -> LossTerms {
    let q = cfg.target_quality - m.quality;
    LossTerms {
        id: 1.0 - cos,
        quality: if cfg.hinge_quality { q.max(0.0) } else { q },
        pose: (cfg.target_pose - m.pose.abs()).abs(),
    }
}

/// `L_id + L_quality + L_pose` for one image.
pub fn attrop_loss(image: &Image, v_id: &[f64], evaluators: &Evaluators, cfg: &AttrOpConfig) -> Result<(f64, LossTerms)> {
    let (m, cos) = measure(image, v_id, evaluators)?;
    let t = terms_from(&m, cos, cfg);
    Ok((t.total(), t))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and its analytic gradient with respect to `v`.
pub fn loss_gradient(
    v: &[f64],
    v_id: &[f64],
    generator: &dyn Generator,
    evaluators: &Evaluators,
    cfg: &AttrOpConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let (pose_eval, quality_eval, identity) = evaluators.parts()?;
    let image = generator.generate(v)?;
    let (m, cos) = measure(&image, v_id, evaluators)?;
    let terms = terms_from(&m, cos, cfg);
    let not_diff = |what: &str| Error::Config(format!("analytic gradients need a differentiable {what}"));

    // d(1 − cos(e, v_id))/de
    let ne = norm(&m.embedding);
    let nid = norm(v_id);
    let cot_e: Vec<f64> = m
        .embedding
        .iter()
        .zip(v_id)
        .map(|(e, t)| -(t / (ne * nid) - cos * e / (ne * ne)))
        .collect();
    let mut cot = identity
        .embed_vjp(&image, &cot_e)?
        .ok_or_else(|| not_diff("identity model"))?;

    let dq = if cfg.hinge_quality && m.quality >= cfg.target_quality { 0.0 } else { -1.0 };
    if dq != 0.0 {
        let g = quality_eval.gradient(&image)?.ok_or_else(|| not_diff("quality evaluator"))?;
        cot.iter_mut().zip(&g).for_each(|(c, g)| *c += dq * g);
    }
    // subgradient 0 at both kinks of |P − |pose||
    let dp = sign(m.pose.abs() - cfg.target_pose) * sign(m.pose);
    if dp != 0.0 {
        let g = pose_eval.gradient(&image)?.ok_or_else(|| not_diff("pose evaluator"))?;
        cot.iter_mut().zip(&g).for_each(|(c, g)| *c += dp * g);
    }
    let grad = generator.vjp(v, &cot)?.ok_or_else(|| not_diff("generator"))?;
    Ok((terms, grad))
}

/// Central differences `(f(v + h·e_i) − f(v − h·e_i)) / 2h`, `2·d` calls.
pub fn finite_difference_gradient<F>(mut f: F, v: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut p = v.to_vec();
    let mut grad = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        p[i] = v[i] + h;
        let up = f(&p)?;
        p[i] = v[i] - h;
        let down = f(&p)?;
        p[i] = v[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric {
                iteration: 0,
                what: format!("non-finite function value probing coordinate {i}"),
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub total: f64,
    pub id: f64,
    pub quality: f64,
    pub pose: f64,
    /// FNV-1a of the vector's little-endian f64 bytes, hex.
    pub vector_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttrOpTrace {
    pub records: Vec<TraceRecord>,
}

impl AttrOpTrace {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serializes") + "\n")
            .collect()
    }
}

pub fn vector_hash(v: &[f64]) -> String {
    let mut h = FnvHasher::default();
    for x in v {
        h.write(&x.to_le_bytes());
    }
    format!("{:016x}", h.finish())
}

fn record(iteration: usize, terms: LossTerms, v: &[f64]) -> TraceRecord {
    TraceRecord {
        iteration,
        total: terms.total(),
        id: terms.id,
        quality: terms.quality,
        pose: terms.pose,
        vector_hash: vector_hash(v),
    }
}

fn non_finite(iteration: usize, what: &str) -> Error {
    Error::Numeric {
        iteration,
        what: what.to_string(),
    }
}

/// Runs `cfg.iterations` clipped gradient steps from `v_im`.
pub fn attrop_adjust(
    v_id: &[f64],
    v_im: &[f64],
    generator: &dyn Generator,
    evaluators: &Evaluators,
    cfg: &AttrOpConfig,
) -> Result<(Vec<f64>, AttrOpTrace)> {
    cfg.validate()?;
    evaluators.parts()?;
    if v_id.len() != v_im.len() {
        return Err(Error::Shape(format!("identity of length {} with vector of length {}", v_id.len(), v_im.len())));
    }
    if cfg.grad_mode == GradMode::FiniteDifference {
        let needed = 2 * v_im.len() * cfg.iterations;
        if needed > cfg.fd_budget {
            return Err(Error::Budget {
                needed,
                cap: cfg.fd_budget,
            });
        }
    }
    let eval = |v: &[f64]| -> Result<LossTerms> {
        let img = generator.generate(v)?;
        Ok(attrop_loss(&img, v_id, evaluators, cfg)?.1)
    };

    let mut v = v_im.to_vec();
    let mut terms = eval(&v)?;
    if !terms.total().is_finite() {
        return Err(non_finite(0, "initial loss"));
    }
    let mut trace = AttrOpTrace {
        records: vec![record(0, terms, &v)],
    };
    for t in 1..=cfg.iterations {
        let mut grad = match cfg.grad_mode {
            GradMode::Analytic => loss_gradient(&v, v_id, generator, evaluators, cfg)?.1,
            GradMode::FiniteDifference => {
                finite_difference_gradient(|x| eval(x).map(|l| l.total()), &v, cfg.fd_step).map_err(|e| match e {
                    Error::Numeric { what, .. } => Error::Numeric { iteration: t, what },
                    other => other,
                })?
            }
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(non_finite(t, "gradient"));
        }
        let gn = norm(&grad);
        if gn > cfg.grad_clip {
            let s = cfg.grad_clip / gn;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let current = terms.total();
        let mut step = cfg.step_size;
        let take = |step: f64| -> Vec<f64> { v.iter().zip(&grad).map(|(x, g)| x - step * g).collect() };
        let mut trial = take(step);
        let mut trial_terms = eval(&trial)?;
        if cfg.backtracking {
            for _ in 0..4 {
                if trial_terms.total() <= current {
                    break;
                }
                step *= 0.5;
                trial = take(step);
                trial_terms = eval(&trial)?;
            }
        }
        if !trial_terms.total().is_finite() {
            return Err(non_finite(t, "loss"));
        }
        v = trial;
        terms = trial_terms;
        trace.records.push(record(t, terms, &v));
    }
    Ok((v, trace))
}

/// Pose and identity cosine of the image generated from `v`.
pub fn measure_vector(
    v: &[f64],
    v_id: &[f64],
    generator: &dyn Generator,
    evaluators: &Evaluators,
) -> Result<(f64, f64)> {
    let img = generator.generate(v)?;
    let (m, cos) = measure(&img, v_id, evaluators)?;
    Ok((m.pose, cos))
}

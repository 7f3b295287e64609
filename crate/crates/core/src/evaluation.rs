//! Identity similarity, prompt similarity, ΔCLIP, LPIPS and report
//! aggregation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::{ClipScorer, FaceEmbedder, LpipsScorer};
use crate::linalg::{dot, norm, order_invariant_sum};
use crate::pipeline::{generate, GenerationConfig, PromptTemplate};
use crate::training::{Environment, SubjectProfile, SUPERCLASS_WORD};
use crate::{Error, Result, Tensor};

/// Full-scale reference values for a W+ beard edit. ΔCLIP is on the ×100
/// CLIP scale. Documentation only; the toy backend does not reproduce them.
pub const REFERENCE_BEARD_DELTA_CLIP_X100: f64 = 2.473;
pub const REFERENCE_BEARD_LPIPS: f64 = 0.185;
pub const REFERENCE_BEARD_CS: f64 = 0.731;

/// Cosine similarity of the two images' face embeddings.
pub fn identity_similarity(a: &Tensor, b: &Tensor, embedder: &dyn FaceEmbedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    cosine(&ea, &eb)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("embedding", &[a.len()], &[b.len()]));
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::MetricRange("embedding has zero or non-finite norm".into()));
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// CLIP score of `image` against `text`, checked to lie in `[-1, 1]`.
pub fn prompt_similarity(image: &Tensor, text: &str, scorer: &dyn ClipScorer) -> Result<f64> {
    let s = scorer.score(image, text)?;
    if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
        return Err(Error::MetricRange(format!("CLIP score {s} outside [-1, 1]")));
    }
    Ok(s)
}

/// `PS(after, text) − PS(before, text)`.
pub fn delta_clip(before: &Tensor, after: &Tensor, text: &str, scorer: &dyn ClipScorer) -> Result<f64> {
    Ok(prompt_similarity(after, text, scorer)? - prompt_similarity(before, text, scorer)?)
}

/// Perceptual distance, checked non-negative.
pub fn lpips(a: &Tensor, b: &Tensor, scorer: &dyn LpipsScorer) -> Result<f64> {
    let d = scorer.distance(a, b)?;
    if !d.is_finite() || d < 0.0 {
        return Err(Error::MetricRange(format!("LPIPS distance {d} is negative or non-finite")));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject_id: String,
    pub prompt: String,
    /// Absent when no face was detected.
    pub cs: Option<f64>,
    pub ps: Option<f64>,
    pub lpips: Option<f64>,
    pub delta_clip: Option<f64>,
    /// Why the row (or part of it) is missing.
    pub error: Option<String>,
}

impl EvalRow {
    pub fn new(subject_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            subject_id: subject_id.into(),
            prompt: prompt.into(),
            cs: None,
            ps: None,
            lpips: None,
            delta_clip: None,
            error: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rows: usize,
    pub cs_mean: Option<f64>,
    pub ps_mean: Option<f64>,
    pub lpips_mean: Option<f64>,
    pub delta_clip_mean: Option<f64>,
    /// Rows left out of the CS mean.
    pub cs_excluded: usize,
    pub ps_excluded: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let mut present: Vec<f64> = Vec::new();
    let mut missing = 0;
    for v in values {
        match v {
            Some(x) => present.push(x),
            None => missing += 1,
        }
    }
    if present.is_empty() {
        return (None, missing);
    }
    let n = present.len() as f64;
    (Some(order_invariant_sum(&mut present) / n), missing)
}

impl Aggregate {
    /// Means over the rows where each metric is present. The summation
    /// order is independent of row order.
    pub fn of(rows: &[EvalRow]) -> Self {
        let (cs_mean, cs_excluded) = mean(rows.iter().map(|r| r.cs));
        let (ps_mean, ps_excluded) = mean(rows.iter().map(|r| r.ps));
        let (lpips_mean, _) = mean(rows.iter().map(|r| r.lpips));
        let (delta_clip_mean, _) = mean(rows.iter().map(|r| r.delta_clip));
        Self {
            rows: rows.len(),
            cs_mean,
            ps_mean,
            lpips_mean,
            delta_clip_mean,
            cs_excluded,
            ps_excluded,
        }
    }
}

/// Settings and backend identifiers the report was produced under.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub generation: Option<GenerationConfig>,
    pub environment_fingerprint: String,
    pub face_embedder: String,
    pub clip_scorer: String,
    pub lpips_scorer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, config: EvalConfigEcho) -> Self {
        let aggregate = Aggregate::of(&rows);
        Self {
            rows,
            aggregate,
            config,
        }
    }
}

fn echo(env: &Environment, cfg: Option<GenerationConfig>) -> EvalConfigEcho {
    let b = env.bundle();
    EvalConfigEcho {
        generation: cfg,
        environment_fingerprint: env.fingerprint().to_string(),
        face_embedder: b.face_embedder.id(),
        clip_scorer: b.clip_scorer.id(),
        lpips_scorer: b.lpips_scorer.id(),
    }
}

/// Generates every `(profile, prompt)` pair and scores CS against the
/// profile's source image and PS against the prompt text. Row failures are
/// recorded and the run continues.
pub fn evaluate_personalization(
    profiles: &[SubjectProfile],
    prompts: &[PromptTemplate],
    cfg: &GenerationConfig,
    env: &Environment,
) -> Result<EvalReport> {
    if profiles.is_empty() || prompts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one profile and one prompt"));
    }
    let b = env.bundle();
    let mut rows = Vec::with_capacity(profiles.len() * prompts.len());
    for profile in profiles {
        for template in prompts {
            let text = template.render_with(SUPERCLASS_WORD);
            let mut row = EvalRow::new(profile.subject_id(), template.text());
            match generate(profile, template, cfg, env) {
                Err(e) => row.error = Some(format!("{e}")),
                Ok(trace) => {
                    match profile.source_image() {
                        None => row.error = Some("profile has no source image".into()),
                        Some(src) => match identity_similarity(&trace.image, src, &*b.face_embedder) {
                            Ok(cs) => row.cs = Some(cs),
                            Err(e) => row.error = Some(format!("{e}")),
                        },
                    }
                    match prompt_similarity(&trace.image, &text, &*b.clip_scorer) {
                        Ok(ps) => row.ps = Some(ps),
                        Err(e) => row.error = Some(format!("{e}")),
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(EvalReport::new(rows, echo(env, Some(*cfg))))
}

/// ΔCLIP, LPIPS and CS of one edit against its unedited base.
pub fn evaluate_edit(
    subject_id: &str,
    attribute_text: &str,
    before: &Tensor,
    after: &Tensor,
    env: &Environment,
) -> EvalRow {
    let b = env.bundle();
    let mut row = EvalRow::new(subject_id, attribute_text);
    match delta_clip(before, after, attribute_text, &*b.clip_scorer) {
        Ok(v) => row.delta_clip = Some(v),
        Err(e) => row_error(&mut row.error, e),
    }
    match lpips(before, after, &*b.lpips_scorer) {
        Ok(v) => row.lpips = Some(v),
        Err(e) => row_error(&mut row.error, e),
    }
    match identity_similarity(before, after, &*b.face_embedder) {
        Ok(v) => row.cs = Some(v),
        Err(e) => row_error(&mut row.error, e),
    }
    match prompt_similarity(after, attribute_text, &*b.clip_scorer) {
        Ok(v) => row.ps = Some(v),
        Err(e) => row_error(&mut row.error, e),
    }
    row
}

fn row_error(slot: &mut Option<String>, e: Error) {
    let msg = format!("{e}");
    match slot {
        Some(s) => {
            s.push_str("; ");
            s.push_str(&msg);
        }
        None => *slot = Some(msg),
    }
}

/// Report over pre-scored edit rows.
pub fn edit_report(rows: Vec<EvalRow>, env: &Environment) -> EvalReport {
    EvalReport::new(rows, echo(env, None))
}

//! Request bodies and the work behind each job endpoint. Requests are
//! validated before a job is queued; the job itself only fails on errors
//! that need the heavy computation to surface.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use pc_core::backend::{digest_f64, hex};
use pc_core::composition::{auto_masks, compose, verify_barriers, CompositionPlan, InstanceMaskSet, SequentialRunner};
use pc_core::evaluation::evaluate_personalization;
use pc_core::latent::{extract_direction, EditRequest, SourceTag, WPlusLatent};
use pc_core::pipeline::{
    edit_generate, edited_profile, generate, initial_noise, GenerationConfig, GenerationTrace, PromptTemplate,
};
use pc_core::training::{tune_subject, SubjectProfile, TuneConfig, NEUTRAL_TEMPLATE};
use pc_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::api::ApiError;
use super::jobs::{JobKind, JobRecord, Progress};
use super::store::{valid_subject_id, SubjectEntry};
use super::{Service, BASE_CACHE_LIMIT};
use crate::container::branch_names;
use crate::imageio::{image_to_png, mask_to_png};
use crate::report::{report_csv, report_json};
use crate::runner::ThreadedRunner;
use crate::PcError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub subject_id: String,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub direction: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Sweep {
    pub fn betas(&self) -> Result<Vec<f64>, ApiError> {
        if self.n == 0 {
            return Err(ApiError::bad_request("sweep n must be ≥ 1"));
        }
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(ApiError::bad_request("sweep bounds must be finite"));
        }
        if self.n == 1 {
            if self.lo != self.hi {
                return Err(ApiError::bad_request(format!(
                    "a one-frame sweep needs lo == hi, got {}..{}",
                    self.lo, self.hi
                )));
            }
            return Ok(vec![self.lo]);
        }
        let last = (self.n - 1) as f64;
        Ok((0..self.n)
            .map(|k| {
                if k == self.n - 1 {
                    self.hi
                } else {
                    self.lo + (self.hi - self.lo) * k as f64 / last
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    pub subject_id: String,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    /// Direction name → strength, applied together.
    #[serde(default)]
    pub edits: BTreeMap<String, f64>,
    /// One frame per strength of `direction`, on top of `edits`.
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskChoice {
    /// `"auto"`: segment a layout generation.
    Auto(String),
    /// Subject masks then the background, each row-major at latent
    /// resolution. They must already sum to one at every pixel.
    Uploaded(Vec<Vec<f64>>),
}

impl Default for MaskChoice {
    fn default() -> Self {
        MaskChoice::Auto("auto".into())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeRequest {
    pub subject_ids: Vec<String>,
    /// Needs one slot per subject; `"A photo of {S1} and {S2}"` style.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub masks: MaskChoice,
    /// Subject id → direction → strength.
    #[serde(default)]
    pub edits: BTreeMap<String, BTreeMap<String, f64>>,
    /// Run branches on separate threads.
    #[serde(default = "yes")]
    pub parallel: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub subject_ids: Vec<String>,
    pub prompts: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionPair {
    /// Row-major W+ code with the attribute.
    pub after: Vec<f64>,
    pub before: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewDirection {
    pub name: String,
    pub pairs: Vec<DirectionPair>,
}

/// Fields of `POST /subjects`.
pub(crate) struct NewSubject {
    pub subject_id: Option<String>,
    pub image: Vec<u8>,
    pub tune: bool,
    pub tune_cfg: TuneConfig,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn err_string(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn slots_template(n: usize) -> String {
    let names: Vec<String> = (1..=n).map(|i| format!("{{S{i}}}")).collect();
    format!("A photo of {}", names.join(" and "))
}

impl Service {
    fn gen_config(
        &self,
        seed: u64,
        tau: Option<f64>,
        steps: Option<usize>,
        capture: bool,
    ) -> Result<GenerationConfig, ApiError> {
        let d = self.cfg.generation;
        let cfg = GenerationConfig {
            steps: steps.unwrap_or(d.steps),
            tau: tau.unwrap_or(d.tau),
            seed,
            capture_attention: capture,
        };
        cfg.validate(self.env.timesteps())?;
        Ok(cfg)
    }

    fn template(&self, prompt: Option<&str>, default: &str) -> Result<PromptTemplate, ApiError> {
        Ok(PromptTemplate::with_default_placeholder(prompt.unwrap_or(default))?)
    }

    pub(crate) fn entry(&self, id: &str) -> Result<SubjectEntry, ApiError> {
        self.store
            .subject(id)?
            .ok_or_else(|| ApiError::not_found(format!("unknown subject '{id}'")))
    }

    fn load(&self, id: &str) -> Result<SubjectProfile, ApiError> {
        let entry = self.entry(id)?;
        let p = self.store.load_profile(&entry)?;
        self.env.check_profile(&p)?;
        Ok(p)
    }

    fn check_edits(&self, edits: &BTreeMap<String, f64>) -> Result<(), ApiError> {
        let catalog = self.catalog();
        for (name, beta) in edits {
            catalog.get(name)?;
            self.check_beta(*beta)?;
        }
        Ok(())
    }

    fn check_beta(&self, beta: f64) -> Result<(), ApiError> {
        if !beta.is_finite() || beta.abs() > self.cfg.beta_max {
            return Err(ApiError::bad_request(format!(
                "strength {beta} outside [-{m}, {m}]",
                m = self.cfg.beta_max
            )));
        }
        Ok(())
    }

    fn png_artifact(&self, t: &Tensor) -> Result<String, PcError> {
        self.store.put_artifact(&image_to_png(t)?, "png")
    }
}

/// Digest of the full-precision pixels. Edits smaller than one 8-bit step
/// leave the PNG unchanged but not this.
fn image_digest(t: &Tensor) -> String {
    hex(&digest_f64("image", &[t.data()]))
}

impl Service {
    pub(crate) fn submit_subject(self: &Arc<Self>, req: NewSubject) -> Result<JobRecord, ApiError> {
        let b = self.env.bundle();
        let image = crate::imageio::decode_image(&req.image, b.image_codec.image_shape())
            .map_err(|e| ApiError::bad_request(format!("unreadable image: {e}")))?;
        let subject_id = match req.subject_id {
            Some(id) => id,
            None => format!("s{}", &crate::container::sha256_hex(&req.image)[..12]),
        };
        if !valid_subject_id(&subject_id) {
            return Err(ApiError::bad_request(format!(
                "subject_id '{subject_id}' must be 1-64 characters of [A-Za-z0-9_-]"
            )));
        }
        if self.store.subject(&subject_id)?.is_some() {
            return Err(ApiError::conflict(format!("subject '{subject_id}' already exists")));
        }
        if req.tune {
            req.tune_cfg.validate()?;
        }
        b.face_embedder.embed(&image)?;
        let svc = Arc::clone(self);
        let kind = if req.tune { JobKind::Tune } else { JobKind::Embed };
        Ok(self.jobs.submit(kind, move |p| svc.run_subject(&subject_id, &image, req.tune, &req.tune_cfg, p))?)
    }

    fn run_subject(
        &self,
        id: &str,
        image: &Tensor,
        tune: bool,
        cfg: &TuneConfig,
        progress: &Progress<'_>,
    ) -> Result<Value, String> {
        let created_at = now_secs();
        let (profile, fit) = if tune {
            let w = self.env.bundle().gan_encoder.encode(image).map_err(err_string)?;
            progress.set(0.1);
            let out = tune_subject(&self.env, id, image, &w, cfg, created_at).map_err(err_string)?;
            (out.profile, Some((out.eval_before, out.eval_after)))
        } else {
            (self.env.embed_image(id, image, created_at).map_err(err_string)?, None)
        };
        progress.set(0.9);
        let rel = self.store.save_profile(&profile).map_err(err_string)?;
        let thumbnail = self.png_artifact(image).map_err(err_string)?;
        let entry = SubjectEntry {
            subject_id: id.to_owned(),
            profile: rel,
            thumbnail: Some(thumbnail),
            created_at,
            tuned: tune,
            lora_targets: profile.lora().iter().map(|d| d.target().to_owned()).collect(),
            config_fingerprint: profile.config_fingerprint().to_owned(),
        };
        self.store
            .update_subjects(|es| {
                es.retain(|e| e.subject_id != id);
                es.push(entry.clone());
            })
            .map_err(err_string)?;
        Ok(json!({
            "subject": entry,
            "eval_before": fit.map(|f| f.0),
            "eval_after": fit.map(|f| f.1),
        }))
    }

    pub(crate) fn submit_generate(self: &Arc<Self>, req: GenerateRequest) -> Result<JobRecord, ApiError> {
        let profile = self.load(&req.subject_id)?;
        let template = self.template(req.prompt.as_deref(), NEUTRAL_TEMPLATE)?;
        let cfg = self.gen_config(req.seed, req.tau, req.steps, true)?;
        let svc = Arc::clone(self);
        Ok(self.jobs.submit(JobKind::Generate, move |_| {
            let trace = svc.base_trace(&profile, &template, &cfg).map_err(err_string)?;
            let image = svc.png_artifact(&trace.image).map_err(err_string)?;
            Ok(json!({
                "subject_id": profile.subject_id(),
                "prompt": template.text(),
                "image": image,
                "image_digest": image_digest(&trace.image),
                "seed": trace.seed,
                "steps": trace.steps,
            }))
        })?)
    }

    /// The attention-capturing base run, cached per profile and settings.
    fn base_trace(
        &self,
        profile: &SubjectProfile,
        template: &PromptTemplate,
        cfg: &GenerationConfig,
    ) -> pc_core::Result<Arc<GenerationTrace>> {
        let lora: Vec<Vec<f64>> = profile.lora().iter().map(|d| d.delta_matrix()).collect();
        let alpha = [profile.alpha()];
        let mut buffers = vec![profile.w().styles(), &alpha[..]];
        buffers.extend(lora.iter().map(Vec::as_slice));
        let digest = pc_core::backend::digest_f64("base-cache", &buffers);
        let key = format!(
            "{}|{}|{}|{}|{:x}|{}",
            profile.subject_id(),
            pc_core::backend::hex(&digest),
            template.text(),
            cfg.seed,
            cfg.tau.to_bits(),
            cfg.steps
        );
        if let Some(t) = self.bases.lock().unwrap_or_else(|p| p.into_inner()).get(&key) {
            return Ok(Arc::clone(t));
        }
        let trace = Arc::new(generate(profile, template, cfg, &self.env)?);
        let mut bases = self.bases.lock().unwrap_or_else(|p| p.into_inner());
        if bases.len() >= BASE_CACHE_LIMIT {
            bases.clear();
        }
        bases.insert(key, Arc::clone(&trace));
        Ok(trace)
    }

    pub(crate) fn submit_edit(self: &Arc<Self>, req: EditBody) -> Result<JobRecord, ApiError> {
        let profile = self.load(&req.subject_id)?;
        let template = self.template(req.prompt.as_deref(), NEUTRAL_TEMPLATE)?;
        let cfg = self.gen_config(req.seed, req.tau, req.steps, true)?;
        self.check_edits(&req.edits)?;
        let frames: Vec<(Option<f64>, BTreeMap<String, f64>)> = match &req.sweep {
            Some(s) => {
                self.catalog().get(&s.direction)?;
                let betas = s.betas()?;
                for b in &betas {
                    self.check_beta(*b)?;
                }
                betas
                    .into_iter()
                    .map(|b| {
                        let mut e = req.edits.clone();
                        *e.entry(s.direction.clone()).or_insert(0.0) += b;
                        (Some(b), e)
                    })
                    .collect()
            }
            None if req.edits.is_empty() => {
                return Err(ApiError::bad_request("edit needs `edits` or a `sweep`"));
            }
            None => vec![(None, req.edits.clone())],
        };
        let catalog = self.catalog().clone();
        let svc = Arc::clone(self);
        Ok(self.jobs.submit(JobKind::Edit, move |progress| {
            let base = svc.base_trace(&profile, &template, &cfg).map_err(err_string)?;
            let base_image = svc.png_artifact(&base.image).map_err(err_string)?;
            let total = frames.len() as f64;
            let mut out = Vec::with_capacity(frames.len());
            for (k, (beta, edits)) in frames.into_iter().enumerate() {
                let request = EditRequest::new(edits.clone().into_iter().collect()).map_err(err_string)?;
                let trace = edit_generate(&profile, &request, &catalog, &base, &template, &cfg, &svc.env)
                    .map_err(err_string)?;
                out.push(json!({
                    "beta": beta,
                    "edits": edits,
                    "image": svc.png_artifact(&trace.image).map_err(err_string)?,
                    "image_digest": image_digest(&trace.image),
                }));
                progress.set((k + 1) as f64 / total);
            }
            Ok(json!({
                "subject_id": profile.subject_id(),
                "prompt": template.text(),
                "seed": cfg.seed,
                "base_image": base_image,
                "base_image_digest": image_digest(&base.image),
                "frames": out,
            }))
        })?)
    }

    pub(crate) fn submit_compose(self: &Arc<Self>, req: ComposeRequest) -> Result<JobRecord, ApiError> {
        let n = req.subject_ids.len();
        if n == 0 {
            return Err(ApiError::bad_request("compose needs at least one subject"));
        }
        let mut profiles = Vec::with_capacity(n);
        for id in &req.subject_ids {
            profiles.push(self.load(id)?);
        }
        for (id, edits) in &req.edits {
            if !req.subject_ids.contains(id) {
                return Err(ApiError::bad_request(format!("edits name subject '{id}' which is not composed")));
            }
            self.check_edits(edits)?;
        }
        let template = self.template(req.prompt.as_deref(), &slots_template(n))?;
        if template.slot_count() != n {
            return Err(ApiError::bad_request(format!(
                "prompt has {} subject slot(s) for {n} subject(s)",
                template.slot_count()
            )));
        }
        let cfg = self.gen_config(req.seed, req.tau, req.steps, false)?;
        let uploaded = match &req.masks {
            MaskChoice::Auto(s) if s == "auto" => None,
            MaskChoice::Auto(s) => return Err(ApiError::bad_request(format!("unknown mask mode '{s}'"))),
            MaskChoice::Uploaded(rows) => {
                let [h, w, _] = self.env.bundle().latent_shape();
                if rows.len() != n + 1 {
                    return Err(ApiError::bad_request(format!(
                        "expected {} masks (subjects then background), got {}",
                        n + 1,
                        rows.len()
                    )));
                }
                let masks = rows
                    .iter()
                    .map(|r| Tensor::new([h, w], r.clone()))
                    .collect::<pc_core::Result<Vec<_>>>()?;
                Some(InstanceMaskSet::new(masks)?)
            }
        };
        let catalog = self.catalog().clone();
        let svc = Arc::clone(self);
        let edits = req.edits;
        let ids = req.subject_ids;
        let parallel = req.parallel;
        Ok(self.jobs.submit(JobKind::Compose, move |progress| {
            let env = &svc.env;
            let mut subjects = Vec::with_capacity(n);
            for (id, p) in ids.iter().zip(profiles) {
                subjects.push(match edits.get(id).filter(|e| !e.is_empty()) {
                    Some(e) => {
                        let request = EditRequest::new(e.clone().into_iter().collect()).map_err(err_string)?;
                        edited_profile(&p, &request, &catalog, env).map_err(err_string)?
                    }
                    None => p,
                });
            }
            let masks = match uploaded {
                Some(m) => m,
                None => auto_masks(&template, &cfg, env).map_err(err_string)?,
            };
            progress.set(0.2);
            let plan = CompositionPlan {
                subjects,
                template,
                masks,
                cfg,
            };
            let trace = if parallel {
                compose(&plan, env, &ThreadedRunner)
            } else {
                compose(&plan, env, &SequentialRunner)
            }
            .map_err(err_string)?;
            let seed_checksum = initial_noise(env.bundle().latent_shape(), cfg.seed).checksum();
            verify_barriers(&trace, n + 1, seed_checksum).map_err(err_string)?;
            let mut mask_refs = Vec::with_capacity(n + 1);
            for m in plan.masks.masks() {
                mask_refs.push(svc.store.put_artifact(&mask_to_png(m).map_err(err_string)?, "png").map_err(err_string)?);
            }
            Ok(json!({
                "subject_ids": ids,
                "prompt": plan.template.text(),
                "seed": cfg.seed,
                "image": svc.png_artifact(&trace.image).map_err(err_string)?,
                "image_digest": image_digest(&trace.image),
                "branches": branch_names(n),
                "grid": plan.masks.grid(),
                "masks": mask_refs,
                "mask_values": plan.masks.masks().iter().map(|m| m.data().to_vec()).collect::<Vec<_>>(),
                "partition_error": plan.masks.partition_error(),
                "barriers_verified": true,
                "steps": trace.steps.len(),
            }))
        })?)
    }

    pub(crate) fn submit_eval(self: &Arc<Self>, req: EvalRequest) -> Result<JobRecord, ApiError> {
        if req.subject_ids.is_empty() || req.prompts.is_empty() {
            return Err(ApiError::bad_request("eval needs subject_ids and prompts"));
        }
        let profiles = req
            .subject_ids
            .iter()
            .map(|id| self.load(id))
            .collect::<Result<Vec<_>, _>>()?;
        let templates = req
            .prompts
            .iter()
            .map(|p| self.template(Some(p), NEUTRAL_TEMPLATE))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = self.gen_config(req.seed, req.tau, req.steps, false)?;
        let svc = Arc::clone(self);
        Ok(self.jobs.submit(JobKind::Eval, move |_| {
            let report = evaluate_personalization(&profiles, &templates, &cfg, &svc.env).map_err(err_string)?;
            let json_ref = svc
                .store
                .put_artifact(&report_json(&report).map_err(err_string)?, "json")
                .map_err(err_string)?;
            let csv_ref = svc
                .store
                .put_artifact(&report_csv(&report).map_err(err_string)?, "csv")
                .map_err(err_string)?;
            Ok(json!({ "report": json_ref, "csv": csv_ref, "aggregate": report.aggregate }))
        })?)
    }

    pub(crate) fn add_direction(&self, req: NewDirection) -> Result<Value, ApiError> {
        if req.pairs.is_empty() {
            return Err(ApiError::bad_request("a direction needs at least one pair"));
        }
        let shape = self.env.wplus_shape();
        let code = |v: &Vec<f64>| WPlusLatent::new(shape, v.clone(), SourceTag::Encoded);
        let pairs = req
            .pairs
            .iter()
            .map(|p| Ok((code(&p.after)?, code(&p.before)?)))
            .collect::<pc_core::Result<Vec<_>>>()?;
        let direction = extract_direction(&pairs, req.name.clone())?;
        let mut catalog = self.catalog.write().unwrap_or_else(|p| p.into_inner());
        if catalog.get(&req.name).is_ok() {
            return Err(ApiError::conflict(format!("direction '{}' already exists", req.name)));
        }
        let mut next = catalog.clone();
        next.insert(direction)?;
        self.store.save_catalog(&next)?;
        *catalog = next;
        Ok(direction_json(catalog.get(&req.name)?))
    }

    pub(crate) fn config_json(&self) -> Value {
        let b = self.env.bundle();
        let names: Vec<String> = self.catalog().names().map(str::to_owned).collect();
        json!({
            "directions": names,
            "beta_max": self.cfg.beta_max,
            "T": self.env.timesteps(),
            "tau_default": self.cfg.generation.tau,
            "steps_default": self.cfg.generation.steps,
            "placeholder": pc_core::pipeline::DEFAULT_PLACEHOLDER,
            "neutral_template": NEUTRAL_TEMPLATE,
            "image_shape": b.image_shape(),
            "latent_shape": b.latent_shape(),
            "wplus_shape": self.env.wplus_shape(),
            "environment_fingerprint": self.env.fingerprint(),
            "backend_fingerprint": b.fingerprint(),
            "max_body_bytes": self.cfg.max_body_bytes,
            "tune_defaults": TuneConfig::default(),
        })
    }

    pub(crate) fn subject_json(&self, e: &SubjectEntry) -> Value {
        let mut v = serde_json::to_value(e).unwrap_or(Value::Null);
        v["stale"] = Value::Bool(e.config_fingerprint != self.env.fingerprint());
        v
    }
}

pub(crate) fn direction_json(d: &pc_core::latent::EditDirection) -> Value {
    json!({
        "name": d.name(),
        "shape": d.shape(),
        "num_pairs": d.num_pairs(),
        "provenance": d.provenance(),
    })
}

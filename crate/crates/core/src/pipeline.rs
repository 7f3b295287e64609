//! Personalized sampling: prompt templates with subject slots, delayed
//! token injection, attribute edits with self-attention reuse, and
//! identity interpolation strips.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adaptor::{embed_all_timesteps, TokenEmbeddingSchedule};
use crate::backend::{AttentionControl, BackendBundle, Prompt, TextEncoder};
use crate::composition::BranchId;
use crate::latent::{combine_directions, edit_latent, interpolate, DirectionCatalog, EditRequest, WPlusLatent};
use crate::lora::{Adaptation, LoraDelta};
use crate::rng;
use crate::training::{Environment, ProfileParts, SubjectProfile};
use crate::{Error, Result, Tensor};

/// Name used in the subject slot before the learned tokens take over.
pub const DEFAULT_PLACEHOLDER: &str = "Brad Pitt";
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
    placeholder_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Text(String),
    /// Zero-based subject index.
    Slot(usize),
}

/// What goes into one subject slot.
#[derive(Clone, Copy, Debug)]
pub enum SlotFill<'a> {
    Placeholder,
    Tokens(&'a [f64], &'a [f64]),
}

/// A slot's source over the whole run.
#[derive(Clone, Copy, Debug)]
pub enum SlotBinding<'a> {
    /// Placeholder name at every step.
    Placeholder,
    /// Placeholder while `t/T ≥ τ`, then the schedule's tokens.
    Learned(&'a TokenEmbeddingSchedule),
}

impl PromptTemplate {
    /// `text` must contain the markers `{S1}`, …, `{SN}` exactly once each.
    pub fn new(text: impl Into<String>, placeholder_name: impl Into<String>) -> Result<Self> {
        let t = Self {
            text: text.into(),
            placeholder_name: placeholder_name.into(),
        };
        if t.text.trim().is_empty() {
            return Err(Error::invalid("prompt template is empty"));
        }
        if t.placeholder_name.trim().is_empty() {
            return Err(Error::invalid("placeholder name is empty"));
        }
        t.segments()?;
        Ok(t)
    }

    pub fn with_default_placeholder(text: impl Into<String>) -> Result<Self> {
        Self::new(text, DEFAULT_PLACEHOLDER)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholder_name(&self) -> &str {
        &self.placeholder_name
    }

    fn segments(&self) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        let mut seen: Vec<usize> = Vec::new();
        while let Some(start) = rest.find("{S") {
            let after = &rest[start + 2..];
            let digits = after.bytes().take_while(u8::is_ascii_digit).count();
            if digits == 0 || !after[digits..].starts_with('}') {
                return Err(Error::invalid(format!("malformed subject marker in '{}'", self.text)));
            }
            let n: usize = after[..digits]
                .parse()
                .map_err(|_| Error::invalid("subject marker index overflows"))?;
            if n == 0 {
                return Err(Error::invalid("subject markers start at {S1}"));
            }
            if seen.contains(&n) {
                return Err(Error::invalid(format!("marker {{S{n}}} appears more than once")));
            }
            seen.push(n);
            if start > 0 {
                out.push(Segment::Text(rest[..start].to_string()));
            }
            out.push(Segment::Slot(n - 1));
            rest = &after[digits + 1..];
        }
        if !rest.is_empty() {
            out.push(Segment::Text(rest.to_string()));
        }
        if seen.is_empty() {
            return Err(Error::invalid(format!("template '{}' has no subject marker", self.text)));
        }
        let max = *seen.iter().max().expect("non-empty");
        if max != seen.len() {
            return Err(Error::invalid(format!(
                "template markers must be {{S1}}..{{S{}}} without gaps",
                seen.len()
            )));
        }
        Ok(out)
    }

    pub fn slot_count(&self) -> usize {
        self.segments().map(|s| s.iter().filter(|x| matches!(x, Segment::Slot(_))).count()).unwrap_or(0)
    }

    /// Template text with every slot replaced by `word`.
    pub fn render_with(&self, word: &str) -> String {
        let mut s = String::new();
        for seg in self.segments().unwrap_or_default() {
            match seg {
                Segment::Text(t) => s.push_str(&t),
                Segment::Slot(_) => s.push_str(word),
            }
        }
        s
    }

    /// The prompt for one set of slot fills, in slot order.
    pub fn prompt(&self, fills: &[SlotFill<'_>]) -> Result<Prompt> {
        let segments = self.segments()?;
        let slots = segments.iter().filter(|s| matches!(s, Segment::Slot(_))).count();
        if fills.len() != slots {
            return Err(Error::invalid(format!(
                "template has {slots} subject slot(s) but {} were filled",
                fills.len()
            )));
        }
        let mut p = Prompt::new();
        for seg in segments {
            match seg {
                Segment::Text(t) => p.push_text(t),
                Segment::Slot(i) => match fills[i] {
                    SlotFill::Placeholder => p.push_text(self.placeholder_name.clone()),
                    SlotFill::Tokens(v1, v2) => p.push_tokens(alloc::vec![v1.to_vec(), v2.to_vec()]),
                },
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub steps: usize,
    /// Learned tokens are used once `t/T < tau`.
    pub tau: f64,
    pub seed: u64,
    pub capture_attention: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            tau: DEFAULT_TAU,
            seed: 0,
            capture_attention: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::invalid(format!(
                "steps = {} outside [1, {timesteps}]",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau = {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningSource {
    Placeholder,
    Learned,
}

/// Placeholder while `t/T ≥ τ`, learned tokens after.
pub fn conditioning_source(t: usize, timesteps: usize, tau: f64) -> ConditioningSource {
    if t as f64 / timesteps as f64 >= tau {
        ConditioningSource::Placeholder
    } else {
        ConditioningSource::Learned
    }
}

/// Per-branch evidence for one composition step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub branch: BranchId,
    pub timestep: usize,
    pub conditioning_source: ConditioningSource,
    pub input_checksum: u64,
    pub output_checksum: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub conditioning_source: ConditioningSource,
    /// Checksum of the latent after this step.
    pub latent_checksum: u64,
    /// Empty for single-subject runs.
    pub branches: Vec<BranchRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// Self-attention maps used at each step, one per exposed layer.
    pub self_attention: Option<Vec<Vec<Tensor>>>,
    pub final_latent: Tensor,
    pub image: Tensor,
}

/// Starting latent for a seed, shared by every branch of a run.
pub fn initial_noise(shape: [usize; 3], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "initial-noise");
    Tensor::randn(shape, 1.0, &mut r)
}

/// Conditioning for an arbitrary mix of slot bindings at timestep `t`.
pub fn assemble_slots(
    template: &PromptTemplate,
    slots: &[SlotBinding<'_>],
    t: usize,
    timesteps: usize,
    tau: f64,
    text: &dyn TextEncoder,
) -> Result<(Tensor, ConditioningSource)> {
    if t == 0 || t > timesteps {
        return Err(Error::invalid(format!("timestep {t} outside [1, {timesteps}]")));
    }
    let source = conditioning_source(t, timesteps, tau);
    let mut any_learned = false;
    let mut fills = Vec::with_capacity(slots.len());
    for slot in slots {
        fills.push(match (slot, source) {
            (SlotBinding::Learned(schedule), ConditioningSource::Learned) => {
                any_learned = true;
                let pair = schedule.pair(t)?;
                SlotFill::Tokens(&pair.v1, &pair.v2)
            }
            _ => SlotFill::Placeholder,
        });
    }
    let cond = text.encode(&template.prompt(&fills)?)?;
    let source = if any_learned {
        ConditioningSource::Learned
    } else {
        ConditioningSource::Placeholder
    };
    Ok((cond, source))
}

/// Single-subject conditioning at timestep `t`.
pub fn assemble_conditioning(
    template: &PromptTemplate,
    schedule: &TokenEmbeddingSchedule,
    t: usize,
    cfg: &GenerationConfig,
    text: &dyn TextEncoder,
) -> Result<Tensor> {
    if template.slot_count() != 1 {
        return Err(Error::invalid(format!(
            "single-subject template needs one slot, found {}",
            template.slot_count()
        )));
    }
    assemble_slots(template, &[SlotBinding::Learned(schedule)], t, schedule.len(), cfg.tau, text)
        .map(|(c, _)| c)
}

/// The shared sampler loop for one conditioning setup.
pub(crate) fn sample(
    bundle: &BackendBundle,
    template: &PromptTemplate,
    slots: &[SlotBinding<'_>],
    lora: &[LoraDelta],
    alpha: f64,
    cfg: &GenerationConfig,
    inject: Option<&[Vec<Tensor>]>,
) -> Result<GenerationTrace> {
    let timesteps = bundle.timesteps();
    cfg.validate(timesteps)?;
    let ts = bundle.schedule.sampling_timesteps(cfg.steps)?;
    if let Some(maps) = inject {
        if maps.len() != ts.len() {
            return Err(Error::Precondition(format!(
                "captured attention covers {} steps, run has {}",
                maps.len(),
                ts.len()
            )));
        }
    }
    let adaptation = Adaptation::new(lora, alpha);
    let mut x = initial_noise(bundle.latent_shape(), cfg.seed);
    let mut steps = Vec::with_capacity(ts.len());
    let mut captured = Vec::new();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let run = || -> Result<(Tensor, ConditioningSource, Vec<Tensor>)> {
            let (cond, source) = assemble_slots(template, slots, t, timesteps, cfg.tau, &*bundle.text_encoder)?;
            let control = match inject {
                Some(maps) => AttentionControl::Inject(&maps[k]),
                None => AttentionControl::Compute,
            };
            let out = bundle.denoiser.predict(&x, t, &cond, &adaptation, control)?;
            let next = bundle.schedule.ddim_step(&x, &out.eps, t, t_prev)?;
            next.ensure_finite("sampler latent")?;
            Ok((next, source, out.attention))
        };
        let (next, source, attention) = run().map_err(|e| e.at_step(k))?;
        x = next;
        steps.push(StepRecord {
            t,
            t_prev,
            conditioning_source: source,
            latent_checksum: x.checksum(),
            branches: Vec::new(),
        });
        if cfg.capture_attention {
            captured.push(attention);
        }
    }
    let image = bundle.image_codec.decode(&x)?;
    Ok(GenerationTrace {
        seed: cfg.seed,
        steps,
        self_attention: cfg.capture_attention.then_some(captured),
        final_latent: x,
        image,
    })
}

/// Samples one subject with delayed injection and its LoRA at `profile.alpha`.
pub fn generate(
    profile: &SubjectProfile,
    template: &PromptTemplate,
    cfg: &GenerationConfig,
    env: &Environment,
) -> Result<GenerationTrace> {
    env.check_profile(profile)?;
    if template.slot_count() != 1 {
        return Err(Error::invalid(format!(
            "single-subject template needs one slot, found {}",
            template.slot_count()
        )));
    }
    sample(
        env.bundle(),
        template,
        &[SlotBinding::Learned(profile.token_schedule())],
        profile.lora(),
        profile.alpha(),
        cfg,
        None,
    )
}

/// `profile` with `ŵ = w + Σ βₖ dₖ` and its schedule re-embedded by the
/// adaptor that produced the original.
pub fn edited_profile(
    profile: &SubjectProfile,
    edits: &EditRequest,
    catalog: &DirectionCatalog,
    env: &Environment,
) -> Result<SubjectProfile> {
    let direction = combine_directions(edits, catalog)?;
    let w_hat = edit_latent(profile.w(), &direction, 1.0)?;
    with_latent(profile, &w_hat, env)
}

fn with_latent(profile: &SubjectProfile, w: &WPlusLatent, env: &Environment) -> Result<SubjectProfile> {
    let w = w.to_f32_precision();
    let schedule = embed_all_timesteps(env.adaptor_for(profile), &w)?.to_f32_precision();
    let parts = profile.clone().into_parts();
    SubjectProfile::from_parts(ProfileParts {
        w,
        token_schedule: schedule,
        ..parts
    })
}

/// Regenerates an edited subject from the base run's noise and
/// self-attention maps.
pub fn edit_generate(
    profile: &SubjectProfile,
    edits: &EditRequest,
    catalog: &DirectionCatalog,
    base: &GenerationTrace,
    template: &PromptTemplate,
    cfg: &GenerationConfig,
    env: &Environment,
) -> Result<GenerationTrace> {
    env.check_profile(profile)?;
    let Some(maps) = base.self_attention.as_deref() else {
        return Err(Error::Precondition(
            "base generation was run without capture_attention".into(),
        ));
    };
    if base.seed != cfg.seed {
        return Err(Error::Precondition(format!(
            "base seed {} differs from edit seed {}",
            base.seed, cfg.seed
        )));
    }
    let edited = edited_profile(profile, edits, catalog, env)?;
    if template.slot_count() != 1 {
        return Err(Error::invalid("edit template needs exactly one slot"));
    }
    sample(
        env.bundle(),
        template,
        &[SlotBinding::Learned(edited.token_schedule())],
        edited.lora(),
        edited.alpha(),
        cfg,
        Some(maps),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationFrame {
    pub lam: f64,
    pub w: WPlusLatent,
    pub image: Tensor,
}

/// `n` frames along the straight line from `a.w` to `b.w`, all from the
/// same seed, through the environment's adaptor and without LoRA.
pub fn interpolation_strip(
    a: &SubjectProfile,
    b: &SubjectProfile,
    n: usize,
    template: &PromptTemplate,
    cfg: &GenerationConfig,
    env: &Environment,
) -> Result<Vec<InterpolationFrame>> {
    if n < 2 {
        return Err(Error::invalid(format!("interpolation strip needs n ≥ 2, got {n}")));
    }
    if a.w().shape() != b.w().shape() {
        return Err(Error::dim(
            "interpolation endpoints",
            &a.w().shape().as_array(),
            &b.w().shape().as_array(),
        ));
    }
    env.check_profile(a)?;
    env.check_profile(b)?;
    (0..n)
        .map(|k| {
            let lam = k as f64 / (n - 1) as f64;
            let w = interpolate(a.w(), b.w(), lam)?.to_f32_precision();
            let schedule = embed_all_timesteps(env.adaptor(), &w)?.to_f32_precision();
            let trace = sample(
                env.bundle(),
                template,
                &[SlotBinding::Learned(&schedule)],
                &[],
                0.0,
                cfg,
                None,
            )?;
            Ok(InterpolationFrame {
                lam,
                w,
                image: trace.image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn template_parsing() {
        let t = PromptTemplate::with_default_placeholder("{S1} and {S2} playing chess").unwrap();
        assert_eq!(t.slot_count(), 2);
        assert_eq!(t.render_with("x"), "x and x playing chess");
        assert!(PromptTemplate::with_default_placeholder("no slots").is_err());
        assert!(PromptTemplate::with_default_placeholder("{S1} {S1}").is_err());
        assert!(PromptTemplate::with_default_placeholder("{S2} only").is_err());
        assert!(PromptTemplate::with_default_placeholder("{S} bad").is_err());
        assert!(t.prompt(&[SlotFill::Placeholder]).is_err());
    }

    #[test]
    fn source_enumeration() {
        let placeholder: Vec<usize> = (1..=10)
            .filter(|&t| conditioning_source(t, 10, 0.7) == ConditioningSource::Placeholder)
            .collect();
        assert_eq!(placeholder, vec![7, 8, 9, 10]);
        assert!((1..=10).all(|t| conditioning_source(t, 10, 0.0) == ConditioningSource::Placeholder));
    }

    #[test]
    fn config_validation() {
        let cfg = GenerationConfig {
            steps: 11,
            ..GenerationConfig::default()
        };
        assert!(cfg.validate(10).is_err());
        let cfg = GenerationConfig {
            tau: 1.5,
            ..GenerationConfig::default()
        };
        assert!(cfg.validate(10).is_err());
    }
}

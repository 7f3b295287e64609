//! Backend bundle specs.
//!
//! A spec names one component per slot, each with a `kind` looked up in a
//! [`Registry`], an optional `weights_path` (relative to the spec file) and
//! free-form `params`. Non-reentrant components are wrapped so calls into
//! them are serialized.
//!
//! ```toml
//! [toy]
//! seed = 7
//!
//! [declared]
//! wplus_shape = { layers = 3, dims = 8 }
//! token_dim = 16
//! timesteps = 10
//!
//! [components.denoiser]
//! kind = "toy"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use pc_core::adaptor::AdaptorConfig;
use pc_core::backend::toy::{
    ToyBackendConfig, ToyClipScorer, ToyDenoiser, ToyFaceEmbedder, ToyGanEncoder, ToyImageCodec, ToyLpips,
    ToySegmenter, ToyTextEncoder,
};
use pc_core::backend::{
    AttentionControl, BackendBundle, BackendParts, ClipScorer, Component, DeclaredShapes, Denoiser,
    DenoiserGrads, DenoiserOutput, FaceEmbedder, GanEncoder, ImageCodec, LoraTarget, LpipsScorer, Prompt,
    Segmenter, TextEncoder,
};
use pc_core::latent::{WPlusLatent, WPlusShape};
use pc_core::lora::Adaptation;
use pc_core::losses::NoiseSchedule;
use pc_core::training::Environment;
use pc_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{PcError, PcResult};

/// Environment variable holding a bundle spec path.
pub const BACKEND_ENV: &str = "PC_BACKEND";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    GanEncoder,
    TextEncoder,
    Denoiser,
    ImageCodec,
    FaceEmbedder,
    Segmenter,
    ClipScorer,
    LpipsScorer,
}

impl Slot {
    pub const ALL: [Slot; 8] = [
        Slot::GanEncoder,
        Slot::TextEncoder,
        Slot::Denoiser,
        Slot::ImageCodec,
        Slot::FaceEmbedder,
        Slot::Segmenter,
        Slot::ClipScorer,
        Slot::LpipsScorer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::GanEncoder => "gan_encoder",
            Slot::TextEncoder => "text_encoder",
            Slot::Denoiser => "denoiser",
            Slot::ImageCodec => "image_codec",
            Slot::FaceEmbedder => "face_embedder",
            Slot::Segmenter => "segmenter",
            Slot::ClipScorer => "clip_scorer",
            Slot::LpipsScorer => "lpips_scorer",
        }
    }

    pub fn from_name(name: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub kind: String,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default)]
    pub params: Value,
    /// Forces serialized access even if the component claims reentrancy.
    #[serde(default)]
    pub exclusive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclaredSpec {
    pub wplus_shape: WPlusShape,
    pub token_dim: usize,
    pub timesteps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Linear {
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    ScaledLinear {
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    AlphaBar {
        alpha_bar: Vec<f64>,
    },
}

impl ScheduleSpec {
    pub fn build(&self) -> PcResult<NoiseSchedule> {
        Ok(match self {
            ScheduleSpec::Linear {
                timesteps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(*timesteps, *beta_start, *beta_end)?,
            ScheduleSpec::ScaledLinear {
                timesteps,
                beta_start,
                beta_end,
            } => NoiseSchedule::scaled_linear(*timesteps, *beta_start, *beta_end)?,
            ScheduleSpec::AlphaBar { alpha_bar } => NoiseSchedule::from_alpha_bar(alpha_bar.clone())?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    /// Parameters shared by every `toy` component; per-component `params`
    /// override individual fields.
    #[serde(default)]
    pub toy: Option<Value>,
    #[serde(default)]
    pub declared: Option<DeclaredSpec>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub components: BTreeMap<String, ComponentSpec>,
}

impl BundleSpec {
    /// Every slot backed by the toy component.
    pub fn toy(cfg: &ToyBackendConfig) -> Self {
        let toy = serde_json::to_value(cfg).expect("toy config serializes");
        Self {
            toy: Some(toy),
            declared: Some(DeclaredSpec {
                wplus_shape: cfg.wplus_shape,
                token_dim: cfg.token_dim,
                timesteps: cfg.timesteps,
            }),
            schedule: None,
            components: Slot::ALL
                .iter()
                .map(|s| {
                    (
                        s.name().to_owned(),
                        ComponentSpec {
                            kind: "toy".into(),
                            ..Default::default()
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn parse(text: &str, toml_syntax: bool) -> PcResult<Self> {
        if toml_syntax {
            toml::from_str(text).map_err(|source| PcError::Toml {
                context: "bundle spec".into(),
                source,
            })
        } else {
            serde_json::from_str(text).map_err(|e| PcError::json("bundle spec", e))
        }
    }

    pub fn read(path: &Path) -> PcResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PcError::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        Self::parse(&text, is_toml)
    }
}

pub enum Built {
    GanEncoder(Arc<dyn GanEncoder>),
    TextEncoder(Arc<dyn TextEncoder>),
    Denoiser(Arc<dyn Denoiser>),
    ImageCodec(Arc<dyn ImageCodec>),
    FaceEmbedder(Arc<dyn FaceEmbedder>),
    Segmenter(Arc<dyn Segmenter>),
    ClipScorer(Arc<dyn ClipScorer>),
    LpipsScorer(Arc<dyn LpipsScorer>),
}

impl Built {
    fn slot(&self) -> Slot {
        match self {
            Built::GanEncoder(_) => Slot::GanEncoder,
            Built::TextEncoder(_) => Slot::TextEncoder,
            Built::Denoiser(_) => Slot::Denoiser,
            Built::ImageCodec(_) => Slot::ImageCodec,
            Built::FaceEmbedder(_) => Slot::FaceEmbedder,
            Built::Segmenter(_) => Slot::Segmenter,
            Built::ClipScorer(_) => Slot::ClipScorer,
            Built::LpipsScorer(_) => Slot::LpipsScorer,
        }
    }

    fn reentrant(&self) -> bool {
        match self {
            Built::GanEncoder(c) => c.reentrant(),
            Built::TextEncoder(c) => c.reentrant(),
            Built::Denoiser(c) => c.reentrant(),
            Built::ImageCodec(c) => c.reentrant(),
            Built::FaceEmbedder(c) => c.reentrant(),
            Built::Segmenter(c) => c.reentrant(),
            Built::ClipScorer(c) => c.reentrant(),
            Built::LpipsScorer(c) => c.reentrant(),
        }
    }

    fn exclusive(self) -> Built {
        match self {
            Built::GanEncoder(c) => Built::GanEncoder(Arc::new(Exclusive::new(c))),
            Built::TextEncoder(c) => Built::TextEncoder(Arc::new(Exclusive::new(c))),
            Built::Denoiser(c) => Built::Denoiser(Arc::new(Exclusive::new(c))),
            Built::ImageCodec(c) => Built::ImageCodec(Arc::new(Exclusive::new(c))),
            Built::FaceEmbedder(c) => Built::FaceEmbedder(Arc::new(Exclusive::new(c))),
            Built::Segmenter(c) => Built::Segmenter(Arc::new(Exclusive::new(c))),
            Built::ClipScorer(c) => Built::ClipScorer(Arc::new(Exclusive::new(c))),
            Built::LpipsScorer(c) => Built::LpipsScorer(Arc::new(Exclusive::new(c))),
        }
    }
}

/// Context a factory gets besides the component's own spec.
pub struct BuildContext<'a> {
    /// Directory that relative `weights_path`s resolve against.
    pub base_dir: &'a Path,
    /// The spec's shared `toy` table.
    pub shared_toy: Option<&'a Value>,
}

pub trait ComponentFactory: Send + Sync {
    fn build(&self, slot: Slot, spec: &ComponentSpec, ctx: &BuildContext<'_>) -> PcResult<Built>;

    /// Noise schedule implied by the denoiser's spec, used when the bundle
    /// spec has none.
    fn default_schedule(&self, _spec: &ComponentSpec, _ctx: &BuildContext<'_>) -> PcResult<Option<NoiseSchedule>> {
        Ok(None)
    }
}

#[derive(Clone)]
pub struct Registry {
    factories: BTreeMap<String, Arc<dyn ComponentFactory>>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("toy", Arc::new(ToyFactory));
        r
    }
}

impl Registry {
    pub fn register(&mut self, kind: impl Into<String>, factory: Arc<dyn ComponentFactory>) {
        self.factories.insert(kind.into(), factory);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    fn factory(&self, slot: Slot, kind: &str) -> PcResult<&Arc<dyn ComponentFactory>> {
        self.factories.get(kind).ok_or_else(|| {
            PcError::Config(format!(
                "unknown component kind \"{kind}\" for \"{}\" (known: {})",
                slot.name(),
                self.kinds().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Builds and validates every component named by `spec`.
    pub fn build(&self, spec: &BundleSpec, base_dir: &Path) -> PcResult<BackendBundle> {
        for name in spec.components.keys() {
            if Slot::from_name(name).is_none() {
                return Err(PcError::Config(format!("bundle spec names unknown component \"{name}\"")));
            }
        }
        let ctx = BuildContext {
            base_dir,
            shared_toy: spec.toy.as_ref(),
        };
        let mut built: BTreeMap<Slot, Built> = BTreeMap::new();
        for slot in Slot::ALL {
            let cs = spec
                .components
                .get(slot.name())
                .ok_or_else(|| PcError::Config(format!("bundle spec has no \"{}\" component", slot.name())))?;
            let b = self.factory(slot, &cs.kind)?.build(slot, cs, &ctx)?;
            if b.slot() != slot {
                return Err(PcError::Config(format!(
                    "factory \"{}\" built a {} for the \"{}\" slot",
                    cs.kind,
                    b.slot().name(),
                    slot.name()
                )));
            }
            let b = if cs.exclusive || !b.reentrant() { b.exclusive() } else { b };
            built.insert(slot, b);
        }
        let schedule = match &spec.schedule {
            Some(s) => s.build()?,
            None => {
                let cs = &spec.components[Slot::Denoiser.name()];
                self.factory(Slot::Denoiser, &cs.kind)?
                    .default_schedule(cs, &ctx)?
                    .ok_or_else(|| PcError::Config("bundle spec has no \"schedule\"".into()))?
            }
        };
        let mut take = |slot| built.remove(&slot).expect("every slot was built");
        let parts = BackendParts {
            gan_encoder: match take(Slot::GanEncoder) {
                Built::GanEncoder(c) => c,
                _ => unreachable!(),
            },
            text_encoder: match take(Slot::TextEncoder) {
                Built::TextEncoder(c) => c,
                _ => unreachable!(),
            },
            denoiser: match take(Slot::Denoiser) {
                Built::Denoiser(c) => c,
                _ => unreachable!(),
            },
            image_codec: match take(Slot::ImageCodec) {
                Built::ImageCodec(c) => c,
                _ => unreachable!(),
            },
            face_embedder: match take(Slot::FaceEmbedder) {
                Built::FaceEmbedder(c) => c,
                _ => unreachable!(),
            },
            segmenter: match take(Slot::Segmenter) {
                Built::Segmenter(c) => c,
                _ => unreachable!(),
            },
            clip_scorer: match take(Slot::ClipScorer) {
                Built::ClipScorer(c) => c,
                _ => unreachable!(),
            },
            lpips_scorer: match take(Slot::LpipsScorer) {
                Built::LpipsScorer(c) => c,
                _ => unreachable!(),
            },
            schedule,
        };
        let declared = spec.declared.map(|d| DeclaredShapes {
            wplus_shape: d.wplus_shape,
            token_dim: d.token_dim,
            timesteps: d.timesteps,
        });
        Ok(BackendBundle::assemble(parts, declared.as_ref())?)
    }
}

/// Builds seeded toy components. `weights_path` is not accepted.
pub struct ToyFactory;

impl ToyFactory {
    fn config(spec: &ComponentSpec, ctx: &BuildContext<'_>) -> PcResult<ToyBackendConfig> {
        let mut merged = serde_json::Map::new();
        for layer in [ctx.shared_toy, Some(&spec.params)].into_iter().flatten() {
            match layer {
                Value::Null => {}
                Value::Object(m) => merged.extend(m.clone()),
                other => return Err(PcError::Config(format!("toy params must be a table, got {other}"))),
            }
        }
        let cfg: ToyBackendConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| PcError::json("toy params", e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ComponentFactory for ToyFactory {
    fn build(&self, slot: Slot, spec: &ComponentSpec, ctx: &BuildContext<'_>) -> PcResult<Built> {
        if let Some(p) = &spec.weights_path {
            return Err(PcError::Config(format!(
                "toy \"{}\" is seeded and takes no weights_path (got {})",
                slot.name(),
                p.display()
            )));
        }
        let cfg = Self::config(spec, ctx)?;
        Ok(match slot {
            Slot::GanEncoder => Built::GanEncoder(Arc::new(ToyGanEncoder::new(&cfg))),
            Slot::TextEncoder => Built::TextEncoder(Arc::new(ToyTextEncoder::new(&cfg))),
            Slot::Denoiser => Built::Denoiser(Arc::new(ToyDenoiser::new(&cfg)?)),
            Slot::ImageCodec => Built::ImageCodec(Arc::new(ToyImageCodec::new(&cfg)?)),
            Slot::FaceEmbedder => Built::FaceEmbedder(Arc::new(ToyFaceEmbedder::new(&cfg))),
            Slot::Segmenter => Built::Segmenter(Arc::new(ToySegmenter::new(&cfg))),
            Slot::ClipScorer => Built::ClipScorer(Arc::new(ToyClipScorer::new(&cfg))),
            Slot::LpipsScorer => Built::LpipsScorer(Arc::new(ToyLpips::new(&cfg))),
        })
    }

    fn default_schedule(&self, spec: &ComponentSpec, ctx: &BuildContext<'_>) -> PcResult<Option<NoiseSchedule>> {
        Ok(Some(Self::config(spec, ctx)?.schedule()?))
    }
}

/// Serializes every call into a component that is not safe to call
/// concurrently.
pub struct Exclusive<T: ?Sized> {
    gate: Mutex<()>,
    inner: Arc<T>,
}

impl<T: ?Sized> Exclusive<T> {
    pub fn new(inner: Arc<T>) -> Self {
        Self {
            gate: Mutex::new(()),
            inner,
        }
    }

    fn lock(&self) -> MutexGuard<'_, ()> {
        self.gate.lock().unwrap_or_else(|p| p.into_inner())
    }
}

macro_rules! exclusive_component {
    ($($t:ident),*) => {$(
        impl Component for Exclusive<dyn $t> {
            fn id(&self) -> String {
                self.inner.id()
            }
            fn weights_digest(&self) -> [u8; 32] {
                self.inner.weights_digest()
            }
            fn reentrant(&self) -> bool {
                true
            }
        }
    )*};
}

exclusive_component!(
    GanEncoder,
    TextEncoder,
    Denoiser,
    ImageCodec,
    FaceEmbedder,
    Segmenter,
    ClipScorer,
    LpipsScorer
);

type CoreResult<T> = pc_core::Result<T>;

impl GanEncoder for Exclusive<dyn GanEncoder> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
    fn wplus_shape(&self) -> WPlusShape {
        self.inner.wplus_shape()
    }
    fn encode(&self, image: &Tensor) -> CoreResult<WPlusLatent> {
        let _g = self.lock();
        self.inner.encode(image)
    }
}

impl TextEncoder for Exclusive<dyn TextEncoder> {
    fn token_dim(&self) -> usize {
        self.inner.token_dim()
    }
    fn conditioning_shape(&self) -> [usize; 2] {
        self.inner.conditioning_shape()
    }
    fn token_embedding(&self, word: &str) -> CoreResult<Vec<f64>> {
        let _g = self.lock();
        self.inner.token_embedding(word)
    }
    fn encode(&self, prompt: &Prompt) -> CoreResult<Tensor> {
        let _g = self.lock();
        self.inner.encode(prompt)
    }
    fn backward(&self, prompt: &Prompt, d_conditioning: &Tensor) -> CoreResult<Vec<Vec<f64>>> {
        let _g = self.lock();
        self.inner.backward(prompt, d_conditioning)
    }
}

impl Denoiser for Exclusive<dyn Denoiser> {
    fn latent_shape(&self) -> [usize; 3] {
        self.inner.latent_shape()
    }
    fn conditioning_shape(&self) -> [usize; 2] {
        self.inner.conditioning_shape()
    }
    fn timesteps(&self) -> usize {
        self.inner.timesteps()
    }
    fn lora_targets(&self) -> Vec<LoraTarget> {
        self.inner.lora_targets()
    }
    fn predict(
        &self,
        latent: &Tensor,
        t: usize,
        conditioning: &Tensor,
        adaptation: &Adaptation<'_>,
        attention: AttentionControl<'_>,
    ) -> CoreResult<DenoiserOutput> {
        let _g = self.lock();
        self.inner.predict(latent, t, conditioning, adaptation, attention)
    }
    fn backward(
        &self,
        latent: &Tensor,
        t: usize,
        conditioning: &Tensor,
        adaptation: &Adaptation<'_>,
        attention: AttentionControl<'_>,
        d_eps: &Tensor,
    ) -> CoreResult<DenoiserGrads> {
        let _g = self.lock();
        self.inner.backward(latent, t, conditioning, adaptation, attention, d_eps)
    }
}

impl ImageCodec for Exclusive<dyn ImageCodec> {
    fn latent_shape(&self) -> [usize; 3] {
        self.inner.latent_shape()
    }
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
    fn encode(&self, image: &Tensor) -> CoreResult<Tensor> {
        let _g = self.lock();
        self.inner.encode(image)
    }
    fn decode(&self, latent: &Tensor) -> CoreResult<Tensor> {
        let _g = self.lock();
        self.inner.decode(latent)
    }
    fn decode_backward(&self, latent: &Tensor, d_image: &Tensor) -> CoreResult<Tensor> {
        let _g = self.lock();
        self.inner.decode_backward(latent, d_image)
    }
}

impl FaceEmbedder for Exclusive<dyn FaceEmbedder> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }
    fn embed(&self, image: &Tensor) -> CoreResult<Vec<f64>> {
        let _g = self.lock();
        self.inner.embed(image)
    }
    fn embed_backward(&self, image: &Tensor, d_embedding: &[f64]) -> CoreResult<Tensor> {
        let _g = self.lock();
        self.inner.embed_backward(image, d_embedding)
    }
}

impl Segmenter for Exclusive<dyn Segmenter> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
    fn segment(&self, image: &Tensor) -> CoreResult<Vec<Tensor>> {
        let _g = self.lock();
        self.inner.segment(image)
    }
}

impl ClipScorer for Exclusive<dyn ClipScorer> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
    fn score(&self, image: &Tensor, text: &str) -> CoreResult<f64> {
        let _g = self.lock();
        self.inner.score(image, text)
    }
}

impl LpipsScorer for Exclusive<dyn LpipsScorer> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
    fn distance(&self, a: &Tensor, b: &Tensor) -> CoreResult<f64> {
        let _g = self.lock();
        self.inner.distance(a, b)
    }
}

/// Loads the spec at `path` with the default registry.
pub fn load_bundle(path: &Path) -> PcResult<BackendBundle> {
    let spec = BundleSpec::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Registry::default().build(&spec, base)
}

/// The spec path to use: `explicit`, else `$PC_BACKEND`, else none.
pub fn resolve_spec_path(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(BACKEND_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

/// Loads the resolved spec, or the default toy bundle when there is none.
pub fn load_bundle_or_toy(explicit: Option<&Path>) -> PcResult<BackendBundle> {
    match resolve_spec_path(explicit) {
        Some(p) => load_bundle(&p),
        None => Ok(pc_core::backend::toy::toy_bundle(&ToyBackendConfig::default())?),
    }
}

/// Whether the bundle's denoiser is the toy one (and ships toy directions).
pub fn is_toy(bundle: &BackendBundle) -> bool {
    bundle.denoiser.id().starts_with("toy-")
}

/// The compact toy adaptor when the bundle has toy shapes, else the
/// production layout sized to the bundle.
pub fn adaptor_config_for(bundle: &BackendBundle) -> AdaptorConfig {
    let toy = AdaptorConfig::toy();
    if toy.wplus_shape == bundle.wplus_shape()
        && toy.token_dim == bundle.token_dim()
        && toy.max_timestep == bundle.timesteps()
    {
        toy
    } else {
        AdaptorConfig::new(bundle.wplus_shape(), bundle.token_dim(), bundle.timesteps())
    }
}

/// Seed of the adaptor initialization used when no weights file is given.
pub const DEFAULT_ADAPTOR_SEED: u64 = 0;

/// An environment with the adaptor weights at `weights`, or freshly
/// initialized ones.
pub fn environment(bundle: BackendBundle, weights: Option<&Path>) -> PcResult<Environment> {
    match weights {
        Some(p) => {
            let w = crate::container::read_weights(p)?;
            Ok(Environment::new(bundle, w)?)
        }
        None => {
            let cfg = adaptor_config_for(&bundle);
            Ok(Environment::with_initial_adaptor(bundle, &cfg, DEFAULT_ADAPTOR_SEED)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_names_round_trip() {
        for s in Slot::ALL {
            assert_eq!(Slot::from_name(s.name()), Some(s));
        }
    }

    #[test]
    fn toy_spec_matches_the_toy_bundle() {
        let cfg = ToyBackendConfig::default();
        let b = Registry::default().build(&BundleSpec::toy(&cfg), Path::new(".")).unwrap();
        let toy = pc_core::backend::toy::toy_bundle(&cfg).unwrap();
        assert_eq!(b.fingerprint(), toy.fingerprint());
    }
}

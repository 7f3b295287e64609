mod common;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pc::bundle::{self, Built, BuildContext, BundleSpec, ComponentFactory, ComponentSpec, Registry, Slot};
use pc::runner::ThreadedRunner;
use pc::PcError;
use pc_core::backend::toy::{ToyBackendConfig, ToyDenoiser};
use pc_core::backend::{AttentionControl, Component, Denoiser, DenoiserGrads, DenoiserOutput, LoraTarget};
use pc_core::composition::{compose, BranchRunner, CompositionPlan, InstanceMaskSet, SequentialRunner};
use pc_core::lora::Adaptation;
use pc_core::pipeline::{GenerationConfig, PromptTemplate};
use pc_core::Tensor;

const TOML_SPEC: &str = r#"
[toy]
seed = 7

[declared]
wplus_shape = { layers = 3, dims = 8 }
token_dim = 16
timesteps = 10

[schedule]
kind = "linear"
timesteps = 10
beta_start = 0.02
beta_end = 0.4

[components]
gan_encoder = { kind = "toy" }
text_encoder = { kind = "toy" }
denoiser = { kind = "toy" }
image_codec = { kind = "toy" }
face_embedder = { kind = "toy" }
segmenter = { kind = "toy" }
clip_scorer = { kind = "toy" }
lpips_scorer = { kind = "toy" }
"#;

fn toy_fingerprint() -> String {
    pc_core::backend::toy::toy_bundle(&ToyBackendConfig::default())
        .unwrap()
        .fingerprint()
        .to_owned()
}

#[test]
fn toml_and_json_specs_load_the_toy_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("b.toml");
    std::fs::write(&toml_path, TOML_SPEC).unwrap();
    assert_eq!(bundle::load_bundle(&toml_path).unwrap().fingerprint(), toy_fingerprint());

    let json_path = dir.path().join("b.json");
    let spec = BundleSpec::toy(&ToyBackendConfig::default());
    std::fs::write(&json_path, serde_json::to_vec(&spec).unwrap()).unwrap();
    assert_eq!(bundle::load_bundle(&json_path).unwrap().fingerprint(), toy_fingerprint());
}

#[test]
fn missing_component_is_named() {
    let mut spec = BundleSpec::toy(&ToyBackendConfig::default());
    spec.components.remove("segmenter");
    let err = Registry::default().build(&spec, Path::new(".")).unwrap_err();
    assert!(matches!(err, PcError::Config(_)));
    assert!(err.to_string().contains("\"segmenter\""), "{err}");
}

#[test]
fn token_width_disagreement_names_both_sides() {
    let mut spec = BundleSpec::toy(&ToyBackendConfig::default());
    spec.components.get_mut("text_encoder").unwrap().params = serde_json::json!({ "token_dim": 8 });
    let err = Registry::default().build(&spec, Path::new(".")).unwrap_err();
    assert!(matches!(err.core(), Some(pc_core::Error::Validation(_))), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("token_dim") && msg.contains("16") && msg.contains('8'), "{msg}");
}

#[test]
fn unknown_kinds_slots_and_toy_weights_are_refused() {
    let base = BundleSpec::toy(&ToyBackendConfig::default());
    let mut unknown_kind = base.clone();
    unknown_kind.components.get_mut("denoiser").unwrap().kind = "onnx".into();
    let err = Registry::default().build(&unknown_kind, Path::new(".")).unwrap_err().to_string();
    assert!(err.contains("onnx") && err.contains("denoiser"), "{err}");

    let mut extra = base.clone();
    extra.components.insert("vocoder".into(), ComponentSpec { kind: "toy".into(), ..Default::default() });
    assert!(Registry::default().build(&extra, Path::new(".")).is_err());

    let mut weights = base;
    weights.components.get_mut("image_codec").unwrap().weights_path = Some("vae.bin".into());
    assert!(Registry::default().build(&weights, Path::new(".")).is_err());

    assert!(BundleSpec::parse("components = 3", true).is_err());
}

#[test]
fn backend_path_comes_from_the_environment_when_not_given() {
    // The only test in this binary that touches PC_BACKEND.
    std::env::set_var(bundle::BACKEND_ENV, "/from/env.toml");
    assert_eq!(bundle::resolve_spec_path(None).unwrap(), Path::new("/from/env.toml"));
    assert_eq!(bundle::resolve_spec_path(Some(Path::new("x.json"))).unwrap(), Path::new("x.json"));
    std::env::remove_var(bundle::BACKEND_ENV);
    assert!(bundle::resolve_spec_path(None).is_none());
}

/// A toy denoiser that claims not to be reentrant and records how many
/// calls overlap.
struct Fragile {
    inner: ToyDenoiser,
    active: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl Fragile {
    fn enter(&self) -> impl Drop + '_ {
        struct Exit<'a>(&'a AtomicUsize);
        impl Drop for Exit<'_> {
            fn drop(&mut self) {
                self.0.fetch_sub(1, Ordering::SeqCst);
            }
        }
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_micros(200));
        Exit(&self.active)
    }
}

impl Component for Fragile {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn weights_digest(&self) -> [u8; 32] {
        self.inner.weights_digest()
    }
    fn reentrant(&self) -> bool {
        false
    }
}

impl Denoiser for Fragile {
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
        c: &Tensor,
        a: &Adaptation<'_>,
        att: AttentionControl<'_>,
    ) -> pc_core::Result<DenoiserOutput> {
        let _g = self.enter();
        self.inner.predict(latent, t, c, a, att)
    }
    fn backward(
        &self,
        latent: &Tensor,
        t: usize,
        c: &Tensor,
        a: &Adaptation<'_>,
        att: AttentionControl<'_>,
        d: &Tensor,
    ) -> pc_core::Result<DenoiserGrads> {
        let _g = self.enter();
        self.inner.backward(latent, t, c, a, att, d)
    }
}

struct FragileFactory {
    active: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl ComponentFactory for FragileFactory {
    fn build(&self, slot: Slot, _spec: &ComponentSpec, _ctx: &BuildContext<'_>) -> pc::PcResult<Built> {
        assert_eq!(slot, Slot::Denoiser);
        Ok(Built::Denoiser(Arc::new(Fragile {
            inner: ToyDenoiser::new(&ToyBackendConfig::default())?,
            active: Arc::clone(&self.active),
            peak: Arc::clone(&self.peak),
        })))
    }
    fn default_schedule(
        &self,
        _spec: &ComponentSpec,
        _ctx: &BuildContext<'_>,
    ) -> pc::PcResult<Option<pc_core::losses::NoiseSchedule>> {
        Ok(Some(ToyBackendConfig::default().schedule()?))
    }
}

fn two_subject_plan(env: &pc_core::training::Environment) -> CompositionPlan {
    let faces = common::faces(2, 9);
    let subjects = faces
        .iter()
        .enumerate()
        .map(|(i, (img, _))| env.embed_image(&format!("s{i}"), img, 0).unwrap())
        .collect();
    let left = Tensor::from_fn([4, 4], |k| if k % 4 < 2 { 1.0 } else { 0.0 });
    let right = Tensor::from_fn([4, 4], |k| if k % 4 >= 2 { 1.0 } else { 0.0 });
    CompositionPlan {
        subjects,
        template: PromptTemplate::with_default_placeholder("{S1} and {S2} at a cafe").unwrap(),
        masks: InstanceMaskSet::new(vec![left, right, Tensor::zeros([4, 4])]).unwrap(),
        cfg: GenerationConfig {
            seed: 4,
            ..GenerationConfig::default()
        },
    }
}

#[test]
fn non_reentrant_components_are_serialized() {
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let mut registry = Registry::default();
    registry.register(
        "fragile",
        Arc::new(FragileFactory {
            active: Arc::clone(&active),
            peak: Arc::clone(&peak),
        }),
    );
    let mut spec = BundleSpec::toy(&ToyBackendConfig::default());
    spec.components.get_mut("denoiser").unwrap().kind = "fragile".into();
    let b = registry.build(&spec, Path::new(".")).unwrap();
    // Same identity as the plain toy bundle: wrapping does not change it.
    assert_eq!(b.fingerprint(), toy_fingerprint());
    let env = bundle::environment(b, None).unwrap();
    let plan = two_subject_plan(&env);
    let threaded = compose(&plan, &env, &ThreadedRunner).unwrap();
    assert_eq!(peak.load(Ordering::SeqCst), 1);
    let sequential = compose(&plan, &env, &SequentialRunner).unwrap();
    assert!(threaded.image.bit_eq(&sequential.image));
}

#[test]
fn threaded_runner_matches_sequential_bit_for_bit() {
    let env = common::env();
    let plan = two_subject_plan(&env);
    let a = compose(&plan, &env, &ThreadedRunner).unwrap();
    let b = compose(&plan, &env, &SequentialRunner).unwrap();
    assert!(a.final_latent.bit_eq(&b.final_latent));
    assert!(a.image.bit_eq(&b.image));
    assert_eq!(a.steps, b.steps);

    let order = ThreadedRunner.run_all(6, &|i| Ok(Tensor::filled([1], i as f64)));
    let got: Vec<f64> = order.into_iter().map(|r| r.unwrap().data()[0]).collect();
    assert_eq!(got, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let failing = ThreadedRunner.run_all(2, &|i| {
        if i == 1 {
            panic!("branch failure")
        }
        Ok(Tensor::zeros([1]))
    });
    assert!(matches!(failing[1], Err(pc_core::Error::Synchronization(_))));
}

//! Adaptor pretraining over `(image, w)` pairs and per-subject LoRA tuning.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::{
    backward as adaptor_backward, embed_all_timesteps, forward_with_cache, AdaptorConfig,
    AdaptorWeights, TokenEmbeddingSchedule,
};
use crate::backend::toy::{toy_face_pairs, ToyBackendConfig};
use crate::backend::{hex, AttentionControl, BackendBundle};
use crate::latent::{WPlusLatent, WPlusShape};
use crate::linalg::{matmul, transpose};
use crate::lora::{Adaptation, LoraDelta};
use crate::losses::{
    ddim_x0, ddim_x0_eps_scale, diffusion_loss, diffusion_loss_grad, embedding_mse, reg_loss,
    reg_loss_grad, total_loss, DiffusionLatent, LossWeights,
};
use crate::optim::Adam;
use crate::pipeline::{PromptTemplate, SlotFill};
use crate::rng;
use crate::{Error, Result, Tensor};

/// Word whose token embedding the regularizer pulls adaptor outputs toward.
pub const SUPERCLASS_WORD: &str = "person";

/// Prompt used for both training stages; the learned pair fills the slot.
pub const NEUTRAL_TEMPLATE: &str = "A photo of a {S1} person";

pub const DEFAULT_TUNE_ITERATIONS: usize = 50;
pub const DEFAULT_LR_LORA: f64 = 1e-3;
pub const DEFAULT_LR_ADAPTOR: f64 = 5e-6;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_LORA_RANK: usize = 4;
pub const DEFAULT_PRETRAIN_BATCH: usize = 2;
pub const DEFAULT_PRETRAIN_LR: f64 = 1e-3;

/// Abort when the loss exceeds this multiple of its first value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// A bundle paired with adaptor weights whose shapes it accepts.
#[derive(Clone, Debug)]
pub struct Environment {
    bundle: BackendBundle,
    adaptor: AdaptorWeights,
    v_cls: Vec<f64>,
    fingerprint: String,
}

impl Environment {
    pub fn new(bundle: BackendBundle, adaptor: AdaptorWeights) -> Result<Self> {
        let cfg = adaptor.config();
        check_adaptor_config(cfg, &bundle)?;
        let v_cls = bundle.text_encoder.token_embedding(SUPERCLASS_WORD)?;
        let fingerprint = environment_fingerprint(cfg, &bundle);
        Ok(Self {
            bundle,
            adaptor,
            v_cls,
            fingerprint,
        })
    }

    /// Same bundle, freshly initialized adaptor.
    pub fn with_initial_adaptor(bundle: BackendBundle, config: &AdaptorConfig, seed: u64) -> Result<Self> {
        check_adaptor_config(config, &bundle)?;
        let v_cls = bundle.text_encoder.token_embedding(SUPERCLASS_WORD)?;
        let adaptor = AdaptorWeights::init(config, &v_cls, seed)?;
        Self::new(bundle, adaptor)
    }

    pub fn bundle(&self) -> &BackendBundle {
        &self.bundle
    }

    pub fn adaptor(&self) -> &AdaptorWeights {
        &self.adaptor
    }

    /// Replaces the adaptor weights; the layout must not change.
    pub fn set_adaptor(&mut self, adaptor: AdaptorWeights) -> Result<()> {
        if adaptor.config() != self.adaptor.config() {
            return Err(Error::invalid("replacement adaptor has a different configuration"));
        }
        self.adaptor = adaptor;
        Ok(())
    }

    pub fn v_cls(&self) -> &[f64] {
        &self.v_cls
    }

    /// Hex digest of the adaptor configuration and the bundle fingerprint.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn timesteps(&self) -> usize {
        self.bundle.timesteps()
    }

    pub fn wplus_shape(&self) -> WPlusShape {
        self.bundle.wplus_shape()
    }

    pub fn check_profile(&self, profile: &SubjectProfile) -> Result<()> {
        if profile.config_fingerprint != self.fingerprint {
            return Err(Error::Compatibility {
                expected: self.fingerprint.clone(),
                found: profile.config_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Embeds an image: face check, W+ inversion, adaptor schedule. No LoRA.
    pub fn embed_image(&self, subject_id: &str, image: &Tensor, created_at: u64) -> Result<SubjectProfile> {
        self.bundle.face_embedder.embed(image)?;
        let w = self.bundle.gan_encoder.encode(image)?;
        self.profile_from_parts(subject_id, &w, Some(image), created_at)
    }

    /// A profile for a known W+ code using the environment's adaptor.
    pub fn profile_from_latent(&self, subject_id: &str, w: &WPlusLatent, created_at: u64) -> Result<SubjectProfile> {
        self.profile_from_parts(subject_id, w, None, created_at)
    }

    fn profile_from_parts(
        &self,
        subject_id: &str,
        w: &WPlusLatent,
        image: Option<&Tensor>,
        created_at: u64,
    ) -> Result<SubjectProfile> {
        let w = w.to_f32_precision();
        let token_schedule = embed_all_timesteps(&self.adaptor, &w)?.to_f32_precision();
        SubjectProfile::from_parts(ProfileParts {
            subject_id: subject_id.to_string(),
            w,
            token_schedule,
            lora: Vec::new(),
            alpha: DEFAULT_ALPHA,
            created_at,
            config_fingerprint: self.fingerprint.clone(),
            adaptor: None,
            source_image: image.map(Tensor::to_f32_precision),
        })
    }

    /// Adaptor that produced `profile`'s schedule.
    pub fn adaptor_for<'a>(&'a self, profile: &'a SubjectProfile) -> &'a AdaptorWeights {
        profile.adaptor.as_ref().unwrap_or(&self.adaptor)
    }
}

fn check_adaptor_config(cfg: &AdaptorConfig, bundle: &BackendBundle) -> Result<()> {
    cfg.validate()?;
    if cfg.wplus_shape != bundle.wplus_shape() {
        return Err(Error::dim(
            "adaptor W+ shape",
            &bundle.wplus_shape().as_array(),
            &cfg.wplus_shape.as_array(),
        ));
    }
    if cfg.token_dim != bundle.token_dim() {
        return Err(Error::dim("adaptor token_dim", &[bundle.token_dim()], &[cfg.token_dim]));
    }
    if cfg.max_timestep != bundle.timesteps() {
        return Err(Error::dim("adaptor max_timestep", &[bundle.timesteps()], &[cfg.max_timestep]));
    }
    Ok(())
}

/// Hex SHA-256 over the adaptor layout and the bundle fingerprint.
pub fn environment_fingerprint(cfg: &AdaptorConfig, bundle: &BackendBundle) -> String {
    let mut h = Sha256::new();
    h.update(b"pc-environment/v1\0");
    h.update(cfg.canonical_bytes());
    h.update(bundle.fingerprint().as_bytes());
    hex(&h.finalize())
}

/// One `(image, w)` training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub image: Tensor,
    pub w: WPlusLatent,
    pub id: String,
}

impl PairedSample {
    pub fn new(image: Tensor, w: WPlusLatent, id: impl Into<String>) -> Result<Self> {
        image.ensure_finite("training image")?;
        Ok(Self {
            image,
            w,
            id: id.into(),
        })
    }
}

/// `n` synthetic faces from the toy generator.
pub fn toy_dataset(cfg: &ToyBackendConfig, n: usize, seed: u64) -> Result<Vec<PairedSample>> {
    toy_face_pairs(cfg, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (image, w))| PairedSample::new(image, w, format!("toy-{i:04}")))
        .collect()
}

/// Per-term losses of one step (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_reg: f64,
    pub l_id: f64,
    pub total: f64,
    /// Samples whose identity term was dropped because no face was found.
    pub id_skipped: usize,
}

/// Gradients of one step with respect to the trainable state.
struct StepGrads {
    adaptor: AdaptorWeights,
    /// `(dA, dB)` per LoRA delta.
    lora: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Inputs of a single loss evaluation.
struct LossSample<'a> {
    /// `E_ID(image)`, absent when the reference carries no detectable face.
    face_ref: Option<&'a [f64]>,
    z0: &'a Tensor,
    w: &'a WPlusLatent,
    t: usize,
    eps: &'a Tensor,
}

fn neutral_template() -> PromptTemplate {
    PromptTemplate::new(NEUTRAL_TEMPLATE, crate::pipeline::DEFAULT_PLACEHOLDER)
        .expect("neutral template is well-formed")
}

/// Loss of one sample and, when `grads` is given, its gradient accumulated
/// with weight `scale`.
fn sample_loss(
    bundle: &BackendBundle,
    v_cls: &[f64],
    weights: &AdaptorWeights,
    lora: &[LoraDelta],
    loss_weights: &LossWeights,
    sample: &LossSample<'_>,
    grads: Option<(&mut StepGrads, f64)>,
) -> Result<LossBreakdown> {
    let (pair, cache) = forward_with_cache(weights, sample.w, sample.t)?;
    let template = neutral_template();
    let prompt = template.prompt(&[SlotFill::Tokens(&pair.v1, &pair.v2)])?;
    let cond = bundle.text_encoder.encode(&prompt)?;
    let x_t = bundle.schedule.add_noise(sample.z0, sample.eps, sample.t)?;
    let adaptation = Adaptation::new(lora, 1.0);
    let out = bundle
        .denoiser
        .predict(&x_t, sample.t, &cond, &adaptation, AttentionControl::Compute)?;
    let l_diff = diffusion_loss(sample.eps, &out.eps)?;
    let l_reg = reg_loss(&pair, v_cls)?;

    let latent = DiffusionLatent::new(x_t.clone(), sample.t);
    let x0_hat = ddim_x0(&latent, &out.eps, &bundle.schedule)?;
    let image_pred = bundle.image_codec.decode(&x0_hat)?;
    let mut id_skipped = 0;
    let mut id_term: Option<(Vec<f64>, Vec<f64>)> = None;
    let l_id = match sample.face_ref {
        None => {
            id_skipped = 1;
            0.0
        }
        Some(e_ref) => match bundle.face_embedder.embed(&image_pred) {
            Ok(e_pred) => {
                let l = embedding_mse(&e_pred, e_ref)?;
                id_term = Some((e_pred, e_ref.to_vec()));
                l
            }
            Err(Error::FaceNotDetected(_)) => {
                id_skipped = 1;
                0.0
            }
            Err(e) => return Err(e),
        },
    };
    let total = total_loss(l_diff, l_reg, l_id, loss_weights)?;

    if let Some((acc, scale)) = grads {
        let mut d_eps = diffusion_loss_grad(sample.eps, &out.eps)?;
        if let Some((e_pred, e_ref)) = id_term {
            let n = e_pred.len() as f64;
            let d_e: Vec<f64> = e_pred
                .iter()
                .zip(&e_ref)
                .map(|(p, r)| loss_weights.lambda_id * 2.0 * (p - r) / n)
                .collect();
            let d_img = bundle.face_embedder.embed_backward(&image_pred, &d_e)?;
            let d_x0 = bundle.image_codec.decode_backward(&x0_hat, &d_img)?;
            let k = ddim_x0_eps_scale(sample.t, &bundle.schedule)?;
            for (g, dx) in d_eps.data_mut().iter_mut().zip(d_x0.data()) {
                *g += k * dx;
            }
        }
        for g in d_eps.data_mut() {
            *g *= scale;
        }
        let dg = bundle.denoiser.backward(
            &x_t,
            sample.t,
            &cond,
            &adaptation,
            AttentionControl::Compute,
            &d_eps,
        )?;
        let d_tokens = bundle.text_encoder.backward(&prompt, &dg.d_conditioning)?;
        let (r1, r2) = reg_loss_grad(&pair, v_cls)?;
        let lr = loss_weights.lambda_reg * scale;
        let d_v1: Vec<f64> = d_tokens[0].iter().zip(&r1).map(|(a, b)| a + lr * b).collect();
        let d_v2: Vec<f64> = d_tokens[1].iter().zip(&r2).map(|(a, b)| a + lr * b).collect();
        adaptor_backward(weights, &cache, &d_v1, &d_v2, &mut acc.adaptor);

        for (delta, (da, db)) in lora.iter().zip(acc.lora.iter_mut()) {
            let Some((_, g)) = dg.d_targets.iter().find(|(n, _)| n == delta.target()) else {
                continue;
            };
            let [out_dim, in_dim] = delta.target_shape();
            let r = delta.rank();
            // W_eff = W + B·A  ⇒  dB = G·Aᵀ, dA = Bᵀ·G
            let grad_b = matmul(g.data(), out_dim, in_dim, &transpose(delta.a_slice(), r, in_dim), r);
            let grad_a = matmul(&transpose(delta.b_slice(), out_dim, r), r, out_dim, g.data(), in_dim);
            for (x, y) in db.iter_mut().zip(grad_b) {
                *x += y;
            }
            for (x, y) in da.iter_mut().zip(grad_a) {
                *x += y;
            }
        }
    }

    Ok(LossBreakdown {
        l_diff,
        l_reg,
        l_id,
        total,
        id_skipped,
    })
}

fn sample_noise(shape: [usize; 3], seed: u64, label: &str, index: u64) -> Tensor {
    let mut r = rng::indexed_stream(seed, label, index);
    Tensor::randn(shape, 1.0, &mut r)
}

/// Reference face embedding, or `None` when the image has no detectable face.
fn face_reference(bundle: &BackendBundle, image: &Tensor) -> Result<Option<Vec<f64>>> {
    match bundle.face_embedder.embed(image) {
        Ok(e) => Ok(Some(e)),
        Err(Error::FaceNotDetected(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn check_divergence(step: usize, total: f64, initial: Option<f64>) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::Divergence {
            step,
            reason: format!("loss is {total}"),
        });
    }
    if let Some(first) = initial {
        if total > DIVERGENCE_FACTOR * first {
            return Err(Error::Divergence {
                step,
                reason: format!("loss {total} exceeds {DIVERGENCE_FACTOR}× initial {first}"),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: DEFAULT_PRETRAIN_BATCH,
            lr: DEFAULT_PRETRAIN_LR,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid("pretraining learning rate must be > 0"));
        }
        LossWeights::new(self.loss_weights.lambda_reg, self.loss_weights.lambda_id)?;
        Ok(())
    }
}

/// Stage-1 trainer: only the adaptor receives updates.
pub struct Pretrainer<'a> {
    bundle: &'a BackendBundle,
    v_cls: Vec<f64>,
    weights: AdaptorWeights,
    optimizer: Adam,
    cfg: PretrainConfig,
    step: usize,
    initial: Option<f64>,
    history: Vec<LossBreakdown>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(env: &'a Environment, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = env.adaptor().clone();
        let sizes: Vec<usize> = weights.params().iter().map(|p| p.len()).collect();
        Ok(Self {
            bundle: env.bundle(),
            v_cls: env.v_cls().to_vec(),
            optimizer: Adam::new(cfg.lr, &sizes)?,
            weights,
            cfg,
            step: 0,
            initial: None,
            history: Vec::new(),
        })
    }

    pub fn weights(&self) -> &AdaptorWeights {
        &self.weights
    }

    pub fn into_weights(self) -> AdaptorWeights {
        self.weights
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step over `batch`, with one timestep per sample.
    /// Noise is drawn from `seed`.
    pub fn step(&mut self, batch: &[(&PairedSample, usize)], seed: u64) -> Result<LossBreakdown> {
        let step = self.step;
        self.pretrain_step(batch, seed).map_err(|e| e.at_step(step))
    }

    fn pretrain_step(&mut self, batch: &[(&PairedSample, usize)], seed: u64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let bundle = self.bundle;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = StepGrads {
            adaptor: self.weights.zeros_like(),
            lora: Vec::new(),
        };
        let mut mean = LossBreakdown::default();
        for (i, (sample, t)) in batch.iter().enumerate() {
            let z0 = bundle.image_codec.encode(&sample.image)?;
            let eps = sample_noise(bundle.latent_shape(), seed, "pretrain-noise", i as u64);
            let face_ref = face_reference(bundle, &sample.image)?;
            let b = sample_loss(
                bundle,
                &self.v_cls,
                &self.weights,
                &[],
                &self.cfg.loss_weights,
                &LossSample {
                    face_ref: face_ref.as_deref(),
                    z0: &z0,
                    w: &sample.w,
                    t: *t,
                    eps: &eps,
                },
                Some((&mut grads, scale)),
            )?;
            mean.l_diff += scale * b.l_diff;
            mean.l_reg += scale * b.l_reg;
            mean.l_id += scale * b.l_id;
            mean.total += scale * b.total;
            mean.id_skipped += b.id_skipped;
        }
        check_divergence(self.step, mean.total, self.initial)?;
        self.initial.get_or_insert(mean.total);
        let g = grads.adaptor;
        self.optimizer.update(self.weights.params_mut(), &g.params())?;
        if !self.weights.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                reason: "adaptor weights became non-finite".into(),
            });
        }
        self.step += 1;
        self.history.push(mean);
        Ok(mean)
    }

    /// Runs `cfg.steps` steps, sampling pairs and timesteps uniformly.
    pub fn run(&mut self, dataset: &[PairedSample]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::invalid("pretraining dataset is empty"));
        }
        let timesteps = self.bundle.timesteps();
        let mut picker = rng::stream(self.cfg.seed, "pretrain-batches");
        for _ in 0..self.cfg.steps {
            let batch: Vec<(&PairedSample, usize)> = (0..self.cfg.batch_size)
                .map(|_| {
                    let i = picker.random_range(0..dataset.len());
                    let t = picker.random_range(1..=timesteps);
                    (&dataset[i], t)
                })
                .collect();
            let seed = picker.random::<u64>();
            self.step(&batch, seed)?;
        }
        Ok(())
    }
}

/// Stage-1 convenience: trains a copy of `env`'s adaptor on `dataset`.
pub fn pretrain(env: &Environment, dataset: &[PairedSample], cfg: PretrainConfig) -> Result<(AdaptorWeights, Vec<LossBreakdown>)> {
    let mut trainer = Pretrainer::new(env, cfg)?;
    trainer.run(dataset)?;
    let history = trainer.history().to_vec();
    Ok((trainer.into_weights(), history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub iterations: usize,
    pub lr_lora: f64,
    pub lr_adaptor: f64,
    /// LoRA weight applied at inference.
    pub alpha: f64,
    pub loss_weights: LossWeights,
    pub rank: usize,
    pub seed: u64,
    /// Denoiser projections to adapt; every exposed target when `None`.
    pub targets: Option<Vec<String>>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_TUNE_ITERATIONS,
            lr_lora: DEFAULT_LR_LORA,
            lr_adaptor: DEFAULT_LR_ADAPTOR,
            alpha: DEFAULT_ALPHA,
            loss_weights: LossWeights::default(),
            rank: DEFAULT_LORA_RANK,
            seed: 0,
            targets: None,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be ≥ 1"));
        }
        for (name, lr) in [("lr_lora", self.lr_lora), ("lr_adaptor", self.lr_adaptor)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::invalid(format!("{name} = {lr} must be finite and ≥ 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if self.rank == 0 {
            return Err(Error::invalid("LoRA rank must be ≥ 1"));
        }
        LossWeights::new(self.loss_weights.lambda_reg, self.loss_weights.lambda_id)?;
        Ok(())
    }
}

/// Result of subject tuning.
#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub profile: SubjectProfile,
    /// Loss of every iteration, before its update.
    pub history: Vec<LossBreakdown>,
    /// Mean total loss over every timestep with fixed noise, before and
    /// after tuning.
    pub eval_before: f64,
    pub eval_after: f64,
}

/// Stage 2: LoRA deltas plus adaptor fine-tuning on a single image.
pub fn tune_subject(
    env: &Environment,
    subject_id: &str,
    image: &Tensor,
    w: &WPlusLatent,
    cfg: &TuneConfig,
    created_at: u64,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let bundle = env.bundle();
    let face_ref = bundle.face_embedder.embed(image)?;
    let w = w.to_f32_precision();
    let z0 = bundle.image_codec.encode(image)?;

    let mut deltas = init_lora(bundle, cfg)?;
    let mut weights = env.adaptor().clone();
    let adaptor_sizes: Vec<usize> = weights.params().iter().map(|p| p.len()).collect();
    let mut opt_adaptor = Adam::new(cfg.lr_adaptor, &adaptor_sizes)?;
    let lora_sizes: Vec<usize> = deltas
        .iter()
        .flat_map(|d| [d.a_slice().len(), d.b_slice().len()])
        .collect();
    let mut opt_lora = Adam::new(cfg.lr_lora, &lora_sizes)?;

    let timesteps = bundle.timesteps();
    let evaluate = |weights: &AdaptorWeights, deltas: &[LoraDelta]| -> Result<f64> {
        let mut acc = 0.0;
        for t in 1..=timesteps {
            let eps = sample_noise(bundle.latent_shape(), cfg.seed, "tune-eval-noise", t as u64);
            let b = sample_loss(
                bundle,
                env.v_cls(),
                weights,
                deltas,
                &cfg.loss_weights,
                &LossSample {
                    face_ref: Some(&face_ref),
                    z0: &z0,
                    w: &w,
                    t,
                    eps: &eps,
                },
                None,
            )?;
            acc += b.total;
        }
        Ok(acc / timesteps as f64)
    };
    let eval_before = evaluate(&weights, &deltas)?;

    let mut picker = rng::stream(cfg.seed, "tune-timesteps");
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut initial = None;
    for it in 0..cfg.iterations {
        let t = picker.random_range(1..=timesteps);
        let eps = sample_noise(bundle.latent_shape(), cfg.seed, "tune-noise", it as u64);
        let mut grads = StepGrads {
            adaptor: weights.zeros_like(),
            lora: deltas
                .iter()
                .map(|d| (vec![0.0; d.a_slice().len()], vec![0.0; d.b_slice().len()]))
                .collect(),
        };
        let b = sample_loss(
            bundle,
            env.v_cls(),
            &weights,
            &deltas,
            &cfg.loss_weights,
            &LossSample {
                face_ref: Some(&face_ref),
                z0: &z0,
                w: &w,
                t,
                eps: &eps,
            },
            Some((&mut grads, 1.0)),
        )
        .map_err(|e| e.at_step(it))?;
        check_divergence(it, b.total, initial)?;
        initial.get_or_insert(b.total);
        history.push(b);

        opt_adaptor.update(weights.params_mut(), &grads.adaptor.params())?;
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(lora_sizes.len());
        for d in deltas.iter_mut() {
            let (a, bm) = d.a_b_mut();
            params.push(a);
            params.push(bm);
        }
        let g: Vec<&[f64]> = grads
            .lora
            .iter()
            .flat_map(|(da, db)| [da.as_slice(), db.as_slice()])
            .collect();
        opt_lora.update(params, &g)?;
        if !weights.is_finite() || deltas.iter().any(|d| !d.a().is_finite() || !d.b().is_finite()) {
            return Err(Error::Divergence {
                step: it,
                reason: "parameters became non-finite".into(),
            });
        }
    }
    let eval_after = evaluate(&weights, &deltas)?;

    let weights = weights.to_f32_precision();
    let token_schedule = embed_all_timesteps(&weights, &w)?.to_f32_precision();
    let profile = SubjectProfile::from_parts(ProfileParts {
        subject_id: subject_id.to_string(),
        w,
        token_schedule,
        lora: deltas.iter().map(LoraDelta::to_f32_precision).collect(),
        alpha: cfg.alpha,
        created_at,
        config_fingerprint: env.fingerprint().to_string(),
        adaptor: Some(weights),
        source_image: Some(image.to_f32_precision()),
    })?;
    Ok(TuneOutcome {
        profile,
        history,
        eval_before,
        eval_after,
    })
}

/// Seeded `A ~ N(0, 1/rank)`, `B = 0` for every selected target.
fn init_lora(bundle: &BackendBundle, cfg: &TuneConfig) -> Result<Vec<LoraDelta>> {
    let available = bundle.denoiser.lora_targets();
    let names: Vec<String> = match &cfg.targets {
        Some(names) => names.clone(),
        None => available.iter().map(|t| t.name.clone()).collect(),
    };
    if names.is_empty() {
        return Err(Error::invalid("no LoRA targets selected"));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let target = available
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Lookup {
                    kind: "LoRA target",
                    name: name.clone(),
                })?;
            let rank = cfg.rank.min(target.in_dim).min(target.out_dim);
            let mut r = rng::indexed_stream(cfg.seed, "lora-init", i as u64);
            let a = Tensor::randn([rank, target.in_dim], 1.0 / libm::sqrt(rank as f64), &mut r);
            let b = Tensor::zeros([target.out_dim, rank]);
            LoraDelta::new(name.clone(), a, b)
        })
        .collect()
}

/// Owned profile fields, as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileParts {
    pub subject_id: String,
    pub w: WPlusLatent,
    pub token_schedule: TokenEmbeddingSchedule,
    pub lora: Vec<LoraDelta>,
    pub alpha: f64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub config_fingerprint: String,
    /// Tuned adaptor weights, when they differ from the environment's.
    pub adaptor: Option<AdaptorWeights>,
    pub source_image: Option<Tensor>,
}

/// Everything needed to regenerate and edit one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectProfile {
    subject_id: String,
    w: WPlusLatent,
    token_schedule: TokenEmbeddingSchedule,
    lora: Vec<LoraDelta>,
    alpha: f64,
    created_at: u64,
    config_fingerprint: String,
    adaptor: Option<AdaptorWeights>,
    source_image: Option<Tensor>,
}

impl SubjectProfile {
    pub fn from_parts(parts: ProfileParts) -> Result<Self> {
        if parts.subject_id.is_empty() {
            return Err(Error::invalid("subject_id is empty"));
        }
        let t = parts.token_schedule.len();
        if let Some(a) = &parts.adaptor {
            if a.config().max_timestep != t {
                return Err(Error::dim("token schedule length", &[a.config().max_timestep], &[t]));
            }
            if a.config().wplus_shape != parts.w.shape() {
                return Err(Error::dim(
                    "profile W+ shape",
                    &a.config().wplus_shape.as_array(),
                    &parts.w.shape().as_array(),
                ));
            }
        }
        for (i, d) in parts.lora.iter().enumerate() {
            if parts.lora[..i].iter().any(|o| o.target() == d.target()) {
                return Err(Error::invalid(format!("duplicate LoRA target '{}'", d.target())));
            }
        }
        if !parts.alpha.is_finite() {
            return Err(Error::invalid("profile alpha is not finite"));
        }
        Ok(Self {
            subject_id: parts.subject_id,
            w: parts.w,
            token_schedule: parts.token_schedule,
            lora: parts.lora,
            alpha: parts.alpha,
            created_at: parts.created_at,
            config_fingerprint: parts.config_fingerprint,
            adaptor: parts.adaptor,
            source_image: parts.source_image,
        })
    }

    pub fn into_parts(self) -> ProfileParts {
        ProfileParts {
            subject_id: self.subject_id,
            w: self.w,
            token_schedule: self.token_schedule,
            lora: self.lora,
            alpha: self.alpha,
            created_at: self.created_at,
            config_fingerprint: self.config_fingerprint,
            adaptor: self.adaptor,
            source_image: self.source_image,
        }
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn w(&self) -> &WPlusLatent {
        &self.w
    }

    pub fn token_schedule(&self) -> &TokenEmbeddingSchedule {
        &self.token_schedule
    }

    pub fn lora(&self) -> &[LoraDelta] {
        &self.lora
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn config_fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    pub fn adaptor(&self) -> Option<&AdaptorWeights> {
        self.adaptor.as_ref()
    }

    pub fn source_image(&self) -> Option<&Tensor> {
        self.source_image.as_ref()
    }

    /// Same profile with a different inference LoRA weight.
    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::invalid("alpha is not finite"));
        }
        self.alpha = alpha;
        Ok(self)
    }

    /// Same profile without LoRA deltas.
    pub fn without_lora(mut self) -> Self {
        self.lora.clear();
        self
    }

    pub fn with_subject_id(mut self, subject_id: impl Into<String>) -> Self {
        self.subject_id = subject_id.into();
        self
    }
}

//! Deterministic desk-scale backend.
//!
//! Every component is built from seeded matrices and is linear or affine
//! except where the real model's contract forces otherwise (unit-norm face
//! embeddings, cosine CLIP scores, the sigmoid attention gate of the
//! denoiser). All of them are cheap enough that any result can be checked
//! against a straight-line scalar reimplementation.
//!
//! The toy denoiser is spatially local: the prediction at a latent pixel
//! depends only on that pixel and on the conditioning. Hard-mask
//! composition therefore isolates regions exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    digest_f64, AttentionControl, BackendBundle, BackendParts, ClipScorer, Component,
    DeclaredShapes, Denoiser, DenoiserGrads, DenoiserOutput, FaceEmbedder, GanEncoder,
    ImageCodec, LoraTarget, LpipsScorer, Prompt, PromptPiece, Segmenter, TextEncoder,
};
use crate::latent::{
    DirectionCatalog, EditDirection, SourceTag, WPlusLatent, WPlusShape,
};
use crate::linalg::{add_outer, dot, matvec, matvec_t, norm, sigmoid};
use crate::lora::Adaptation;
use crate::losses::NoiseSchedule;
use crate::rng::{self, fnv1a};
use crate::{Error, Result, Tensor};

/// LoRA target names exposed by [`ToyDenoiser`].
pub const TOY_TO_V: &str = "cross_attn.to_v";
pub const TOY_TO_OUT: &str = "cross_attn.to_out";

/// Attribute directions shipped with the toy backend.
pub const TOY_DIRECTIONS: [&str; 4] = ["smile", "age", "beard", "eyeglasses"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendConfig {
    pub seed: u64,
    /// `[height, width, channels]` of the diffusion latent.
    pub latent_grid: [usize; 3],
    pub wplus_shape: WPlusShape,
    pub token_dim: usize,
    pub timesteps: usize,
    /// Image pixels per latent pixel along each axis.
    pub image_scale: usize,
    pub sequence_len: usize,
    pub face_dim: usize,
    pub clip_dim: usize,
    /// Instances the segmenter reports.
    pub instances: usize,
    pub soft_masks: bool,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            latent_grid: [4, 4, 2],
            wplus_shape: WPlusShape { layers: 3, dims: 8 },
            token_dim: 16,
            timesteps: 10,
            image_scale: 2,
            sequence_len: 16,
            face_dim: 8,
            clip_dim: 8,
            instances: 2,
            soft_masks: false,
        }
    }
}

impl ToyBackendConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.latent_grid[0] * self.image_scale,
            self.latent_grid[1] * self.image_scale,
            3,
        ]
    }

    pub fn image_numel(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_grid.iter().product()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, 0.02, 0.4)
    }

    pub fn declared(&self) -> DeclaredShapes {
        DeclaredShapes {
            wplus_shape: self.wplus_shape,
            token_dim: self.token_dim,
            timesteps: self.timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent height", self.latent_grid[0]),
            ("latent width", self.latent_grid[1]),
            ("latent channels", self.latent_grid[2]),
            ("token_dim", self.token_dim),
            ("timesteps", self.timesteps),
            ("image_scale", self.image_scale),
            ("face_dim", self.face_dim),
            ("clip_dim", self.clip_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("toy {name} must be ≥ 1")));
            }
        }
        if self.sequence_len < 4 {
            return Err(Error::Config("toy sequence_len must be ≥ 4".into()));
        }
        WPlusShape::new(self.wplus_shape.layers, self.wplus_shape.dims)?;
        if self.wplus_shape.numel() > self.image_numel() {
            return Err(Error::Config(
                "toy W+ code cannot be larger than the image".into(),
            ));
        }
        Ok(())
    }
}

/// Every toy component for `cfg`, unvalidated.
pub fn toy_parts(cfg: &ToyBackendConfig) -> Result<BackendParts> {
    cfg.validate()?;
    Ok(BackendParts {
        gan_encoder: alloc::sync::Arc::new(ToyGanEncoder::new(cfg)),
        text_encoder: alloc::sync::Arc::new(ToyTextEncoder::new(cfg)),
        denoiser: alloc::sync::Arc::new(ToyDenoiser::new(cfg)?),
        image_codec: alloc::sync::Arc::new(ToyImageCodec::new(cfg)?),
        face_embedder: alloc::sync::Arc::new(ToyFaceEmbedder::new(cfg)),
        segmenter: alloc::sync::Arc::new(ToySegmenter::new(cfg)),
        clip_scorer: alloc::sync::Arc::new(ToyClipScorer::new(cfg)),
        lpips_scorer: alloc::sync::Arc::new(ToyLpips::new(cfg)),
        schedule: cfg.schedule()?,
    })
}

/// The toy bundle, validated against its own declared shapes.
pub fn toy_bundle(cfg: &ToyBackendConfig) -> Result<BackendBundle> {
    BackendBundle::assemble(toy_parts(cfg)?, Some(&cfg.declared()))
}

fn gaussian(rows: usize, cols: usize, scale: f64, seed: u64, label: &str) -> Vec<f64> {
    let mut rng = rng::stream(seed, label);
    (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}

fn check_image(image: &Tensor, shape: [usize; 3], who: &str) -> Result<()> {
    image.ensure_shape(&shape, who)?;
    image.ensure_finite(who)
}

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '<' || *c == '>')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

// ---------------------------------------------------------------------------

/// Linear W+ inversion. The paired synthesis map has orthonormal columns
/// (scaled), so `encode(synthesize(w)) == w` up to rounding.
#[derive(Clone, Debug)]
pub struct ToyGanEncoder {
    image_shape: [usize; 3],
    wplus_shape: WPlusShape,
    /// `numel(image) × numel(w)`, orthonormal columns.
    basis: Vec<f64>,
}

const TOY_SYNTH_GAIN: f64 = 1.5;

impl ToyGanEncoder {
    pub fn new(cfg: &ToyBackendConfig) -> Self {
        let n = cfg.image_numel();
        let k = cfg.wplus_shape.numel();
        let raw = gaussian(k, n, 1.0, cfg.seed, "toy-gan-basis");
        // Gram-Schmidt over the k rows, then store as columns.
        let mut rows: Vec<Vec<f64>> = raw.chunks(n).map(<[f64]>::to_vec).collect();
        for i in 0..k {
            for j in 0..i {
                let proj = dot(&rows[i], &rows[j]);
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= proj * b;
                }
            }
            let nrm = norm(&rows[i]);
            for a in rows[i].iter_mut() {
                *a /= nrm;
            }
        }
        let mut basis = vec![0.0; n * k];
        for (c, row) in rows.iter().enumerate() {
            for (r, &v) in row.iter().enumerate() {
                basis[r * k + c] = v;
            }
        }
        Self {
            image_shape: cfg.image_shape(),
            wplus_shape: cfg.wplus_shape,
            basis,
        }
    }

    /// The toy "generator": an image whose encoding is `w`.
    pub fn synthesize(&self, w: &WPlusLatent) -> Result<Tensor> {
        if w.shape() != self.wplus_shape {
            return Err(Error::dim(
                "toy synthesis",
                &self.wplus_shape.as_array(),
                &w.shape().as_array(),
            ));
        }
        let n: usize = self.image_shape.iter().product();
        let x = matvec(&self.basis, n, self.wplus_shape.numel(), w.styles());
        Tensor::new(self.image_shape, x.into_iter().map(|v| v * TOY_SYNTH_GAIN).collect())
    }
}

impl Component for ToyGanEncoder {
    fn id(&self) -> String {
        "toy-gan-encoder/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        digest_f64("toy-gan-encoder", &[&self.basis])
    }
}

impl GanEncoder for ToyGanEncoder {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }
    fn wplus_shape(&self) -> WPlusShape {
        self.wplus_shape
    }
    fn encode(&self, image: &Tensor) -> Result<WPlusLatent> {
        check_image(image, self.image_shape, "toy gan encoder input")?;
        let n = image.len();
        let styles = matvec_t(&self.basis, n, self.wplus_shape.numel(), image.data())
            .into_iter()
            .map(|v| v / TOY_SYNTH_GAIN)
            .collect();
        WPlusLatent::new(self.wplus_shape, styles, SourceTag::Encoded)
    }
}

/// `(image, w)` pairs synthesized from seeded W+ codes; `w` is the encoder's
/// output on the image.
pub fn toy_face_pairs(cfg: &ToyBackendConfig, n: usize, seed: u64) -> Result<Vec<(Tensor, WPlusLatent)>> {
    let gan = ToyGanEncoder::new(cfg);
    (0..n)
        .map(|i| {
            let mut rng = rng::indexed_stream(seed, "toy-face", i as u64);
            let styles = (0..cfg.wplus_shape.numel())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let w = WPlusLatent::new(cfg.wplus_shape, styles, SourceTag::Synthetic)?;
            let image = gan.synthesize(&w)?;
            let encoded = gan.encode(&image)?;
            Ok((image, encoded))
        })
        .collect()
}

/// A seeded attribute direction.
pub fn toy_direction(name: &str, shape: WPlusShape, seed: u64) -> Result<EditDirection> {
    let mut rng = rng::indexed_stream(seed, "toy-direction", fnv1a(name.as_bytes()));
    let delta = (0..shape.numel())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    EditDirection::external(name, shape, delta)
}

/// Catalog holding every name in [`TOY_DIRECTIONS`].
pub fn toy_catalog(shape: WPlusShape, seed: u64) -> Result<DirectionCatalog> {
    let mut catalog = DirectionCatalog::new();
    for name in TOY_DIRECTIONS {
        catalog.insert(toy_direction(name, shape, seed)?)?;
    }
    Ok(catalog)
}

// ---------------------------------------------------------------------------

/// Hash-seeded vocabulary, `BOS … EOS PAD*` framing and a fixed linear mix.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    seed: u64,
    token_dim: usize,
    sequence_len: usize,
    /// `token_dim × token_dim`
    mix: Vec<f64>,
}

/// Token rows and where each injected vector landed.
type Framed = (Vec<Vec<f64>>, Vec<Option<usize>>);

impl ToyTextEncoder {
    pub fn new(cfg: &ToyBackendConfig) -> Self {
        let d = cfg.token_dim;
        let mut mix = gaussian(d, d, 0.25 / libm::sqrt(d as f64), cfg.seed, "toy-text-mix");
        for i in 0..d {
            mix[i * d + i] += 1.0;
        }
        Self {
            seed: cfg.seed,
            token_dim: d,
            sequence_len: cfg.sequence_len,
            mix,
        }
    }

    fn vocab(&self, word: &str) -> Vec<f64> {
        let mut rng = rng::indexed_stream(self.seed, "toy-vocab", fnv1a(word.as_bytes()));
        (0..self.token_dim)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Token embeddings for the framed sequence, with the positions of
    /// injected vectors (`None` when truncated away).
    fn sequence(&self, prompt: &Prompt) -> Result<Framed> {
        let mut body: Vec<Vec<f64>> = Vec::new();
        let mut injected_at = Vec::new();
        for piece in prompt.pieces() {
            match piece {
                PromptPiece::Text(t) => body.extend(words(t).iter().map(|w| self.vocab(w))),
                PromptPiece::Tokens(vs) => {
                    for v in vs {
                        if v.len() != self.token_dim {
                            return Err(Error::dim("injected token", &[self.token_dim], &[v.len()]));
                        }
                        if v.iter().any(|x| !x.is_finite()) {
                            return Err(Error::invalid("injected token is not finite"));
                        }
                        injected_at.push(Some(body.len() + 1));
                        body.push(v.clone());
                    }
                }
            }
        }
        let capacity = self.sequence_len - 2;
        if body.len() > capacity {
            body.truncate(capacity);
        }
        for slot in injected_at.iter_mut() {
            if slot.is_some_and(|p| p > capacity) {
                *slot = None;
            }
        }
        let mut seq = Vec::with_capacity(self.sequence_len);
        seq.push(self.vocab("<bos>"));
        seq.extend(body);
        seq.push(self.vocab("<eos>"));
        let pad = self.vocab("<pad>");
        while seq.len() < self.sequence_len {
            seq.push(pad.clone());
        }
        Ok((seq, injected_at))
    }
}

impl Component for ToyTextEncoder {
    fn id(&self) -> String {
        "toy-text-encoder/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        let seed = [self.seed as f64, self.sequence_len as f64];
        digest_f64("toy-text-encoder", &[&self.mix, &seed])
    }
}

impl TextEncoder for ToyTextEncoder {
    fn token_dim(&self) -> usize {
        self.token_dim
    }
    fn conditioning_shape(&self) -> [usize; 2] {
        [self.sequence_len, self.token_dim]
    }
    fn token_embedding(&self, word: &str) -> Result<Vec<f64>> {
        let ws = words(word);
        match ws.as_slice() {
            [w] => Ok(self.vocab(w)),
            _ => Err(Error::invalid(format!("'{word}' is not a single token"))),
        }
    }
    fn encode(&self, prompt: &Prompt) -> Result<Tensor> {
        let (seq, _) = self.sequence(prompt)?;
        let d = self.token_dim;
        let data = seq.iter().flat_map(|e| matvec(&self.mix, d, d, e)).collect();
        Tensor::new([self.sequence_len, d], data)
    }
    fn backward(&self, prompt: &Prompt, d_conditioning: &Tensor) -> Result<Vec<Vec<f64>>> {
        d_conditioning.ensure_shape(&self.conditioning_shape(), "toy text encoder gradient")?;
        let (_, injected_at) = self.sequence(prompt)?;
        let d = self.token_dim;
        Ok(injected_at
            .iter()
            .map(|pos| match pos {
                Some(p) => matvec_t(&self.mix, d, d, &d_conditioning.data()[p * d..(p + 1) * d]),
                None => vec![0.0; d],
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------

/// `ε̂_p = A_t[p]·z_p + g_p·(W_out·W_v·mean(c))_p` with the gate
/// `g_p = σ(q·z_p)` exposed as the step's self-attention map.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    grid: [usize; 3],
    timesteps: usize,
    sequence_len: usize,
    token_dim: usize,
    /// Per timestep, per pixel, a `C × C` block.
    a_t: Vec<Vec<f64>>,
    to_v: Tensor,
    to_out: Tensor,
    gate_query: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(cfg: &ToyBackendConfig) -> Result<Self> {
        let schedule = cfg.schedule()?;
        let [h, w, c] = cfg.latent_grid;
        let pixels = h * w;
        let d = cfg.token_dim;
        let mut a_t = Vec::with_capacity(cfg.timesteps);
        for t in 1..=cfg.timesteps {
            let gain = libm::sqrt(1.0 - schedule.alpha_bar(t)?);
            let mut noise = gaussian(pixels * c, c, 0.1, cfg.seed ^ t as u64, "toy-denoiser-a");
            for p in 0..pixels {
                for i in 0..c {
                    noise[(p * c + i) * c + i] += 1.0;
                }
            }
            a_t.push(noise.into_iter().map(|v| v * gain).collect());
        }
        let mut to_v = gaussian(d, d, 0.3 / libm::sqrt(d as f64), cfg.seed, "toy-denoiser-to-v");
        for i in 0..d {
            to_v[i * d + i] += 1.0;
        }
        let to_out = gaussian(pixels * c, d, 2.0 / libm::sqrt(d as f64), cfg.seed, "toy-denoiser-to-out");
        Ok(Self {
            grid: cfg.latent_grid,
            timesteps: cfg.timesteps,
            sequence_len: cfg.sequence_len,
            token_dim: d,
            a_t,
            to_v: Tensor::new([d, d], to_v)?,
            to_out: Tensor::new([pixels * c, d], to_out)?,
            gate_query: gaussian(1, c, 1.0, cfg.seed, "toy-denoiser-gate"),
        })
    }

    /// Frozen base matrix for a LoRA target.
    pub fn base_weight(&self, target: &str) -> Result<&Tensor> {
        match target {
            TOY_TO_V => Ok(&self.to_v),
            TOY_TO_OUT => Ok(&self.to_out),
            other => Err(Error::Lookup {
                kind: "LoRA target",
                name: other.into(),
            }),
        }
    }

    /// `C × C` block of `A_t` at `pixel`.
    pub fn a_block(&self, t: usize, pixel: usize) -> &[f64] {
        let c = self.grid[2];
        &self.a_t[t - 1][pixel * c * c..(pixel + 1) * c * c]
    }

    pub fn gate_query(&self) -> &[f64] {
        &self.gate_query
    }

    fn check(&self, latent: &Tensor, t: usize, conditioning: &Tensor, adaptation: &Adaptation<'_>) -> Result<()> {
        latent.ensure_shape(&self.grid, "toy denoiser latent")?;
        latent.ensure_finite("toy denoiser latent")?;
        conditioning.ensure_shape(&[self.sequence_len, self.token_dim], "toy denoiser conditioning")?;
        conditioning.ensure_finite("toy denoiser conditioning")?;
        if t == 0 || t > self.timesteps {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.timesteps)));
        }
        let targets: Vec<(String, [usize; 2])> = self
            .lora_targets()
            .into_iter()
            .map(|t| (t.name, [t.out_dim, t.in_dim]))
            .collect();
        adaptation.validate(&targets)
    }

    fn mean_conditioning(&self, conditioning: &Tensor) -> Vec<f64> {
        let d = self.token_dim;
        let mut mean = vec![0.0; d];
        for row in conditioning.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.sequence_len as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    fn gates(&self, latent: &Tensor, attention: AttentionControl<'_>) -> Result<Tensor> {
        let [h, w, c] = self.grid;
        match attention {
            AttentionControl::Compute => Ok(Tensor::from_fn([h, w], |p| {
                sigmoid(dot(&self.gate_query, &latent.data()[p * c..(p + 1) * c]))
            })),
            AttentionControl::Inject(maps) => {
                let [map] = maps else {
                    return Err(Error::dim("injected attention maps", &[1], &[maps.len()]));
                };
                map.ensure_shape(&[h, w], "injected attention map")?;
                Ok(map.clone())
            }
        }
    }
}

impl Component for ToyDenoiser {
    fn id(&self) -> String {
        "toy-denoiser/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        let mut bufs: Vec<&[f64]> = self.a_t.iter().map(Vec::as_slice).collect();
        bufs.push(self.to_v.data());
        bufs.push(self.to_out.data());
        bufs.push(&self.gate_query);
        digest_f64("toy-denoiser", &bufs)
    }
}

impl Denoiser for ToyDenoiser {
    fn latent_shape(&self) -> [usize; 3] {
        self.grid
    }
    fn conditioning_shape(&self) -> [usize; 2] {
        [self.sequence_len, self.token_dim]
    }
    fn timesteps(&self) -> usize {
        self.timesteps
    }
    fn lora_targets(&self) -> Vec<LoraTarget> {
        let d = self.token_dim;
        vec![
            LoraTarget {
                name: TOY_TO_V.into(),
                out_dim: d,
                in_dim: d,
            },
            LoraTarget {
                name: TOY_TO_OUT.into(),
                out_dim: self.to_out.shape()[0],
                in_dim: d,
            },
        ]
    }

    fn predict(
        &self,
        latent: &Tensor,
        t: usize,
        conditioning: &Tensor,
        adaptation: &Adaptation<'_>,
        attention: AttentionControl<'_>,
    ) -> Result<DenoiserOutput> {
        self.check(latent, t, conditioning, adaptation)?;
        let [_, _, c] = self.grid;
        let d = self.token_dim;
        let to_v = adaptation.apply(TOY_TO_V, &self.to_v)?;
        let to_out = adaptation.apply(TOY_TO_OUT, &self.to_out)?;
        let cbar = self.mean_conditioning(conditioning);
        let y = matvec(to_v.data(), d, d, &cbar);
        let u = matvec(to_out.data(), to_out.shape()[0], d, &y);
        let gates = self.gates(latent, attention)?;
        let z = latent.data();
        let mut eps = vec![0.0; z.len()];
        for (p, &g) in gates.data().iter().enumerate() {
            let a = self.a_block(t, p);
            let zp = &z[p * c..(p + 1) * c];
            for i in 0..c {
                eps[p * c + i] = dot(&a[i * c..(i + 1) * c], zp) + g * u[p * c + i];
            }
        }
        Ok(DenoiserOutput {
            eps: Tensor::new(self.grid, eps)?,
            attention: vec![gates],
        })
    }

    fn backward(
        &self,
        latent: &Tensor,
        t: usize,
        conditioning: &Tensor,
        adaptation: &Adaptation<'_>,
        attention: AttentionControl<'_>,
        d_eps: &Tensor,
    ) -> Result<DenoiserGrads> {
        self.check(latent, t, conditioning, adaptation)?;
        d_eps.ensure_shape(&self.grid, "toy denoiser output gradient")?;
        let [_, _, c] = self.grid;
        let d = self.token_dim;
        let to_v = adaptation.apply(TOY_TO_V, &self.to_v)?;
        let to_out = adaptation.apply(TOY_TO_OUT, &self.to_out)?;
        let rows = to_out.shape()[0];
        let cbar = self.mean_conditioning(conditioning);
        let y = matvec(to_v.data(), d, d, &cbar);
        let gates = self.gates(latent, attention)?;
        let du: Vec<f64> = d_eps
            .data()
            .iter()
            .enumerate()
            .map(|(k, &g)| g * gates.data()[k / c])
            .collect();
        let mut d_out = Tensor::zeros([rows, d]);
        add_outer(d_out.data_mut(), &du, &y);
        let dy = matvec_t(to_out.data(), rows, d, &du);
        let mut d_to_v = Tensor::zeros([d, d]);
        add_outer(d_to_v.data_mut(), &dy, &cbar);
        let dcbar = matvec_t(to_v.data(), d, d, &dy);
        let n = self.sequence_len as f64;
        let row: Vec<f64> = dcbar.iter().map(|v| v / n).collect();
        let d_conditioning = Tensor::from_fn([self.sequence_len, d], |k| row[k % d]);
        Ok(DenoiserGrads {
            d_conditioning,
            d_targets: vec![(TOY_TO_V.into(), d_to_v), (TOY_TO_OUT.into(), d_out)],
        })
    }
}

// ---------------------------------------------------------------------------

/// Each latent pixel becomes an `s × s` block of RGB through a fixed
/// `3 × C` mix; encoding averages the block and applies the mix's
/// left inverse.
#[derive(Clone, Debug)]
pub struct ToyImageCodec {
    grid: [usize; 3],
    scale: usize,
    /// `3 × C`
    mix: Vec<f64>,
    /// `C × 3`, left inverse of `mix`.
    unmix: Vec<f64>,
}

impl ToyImageCodec {
    pub fn new(cfg: &ToyBackendConfig) -> Result<Self> {
        let c = cfg.latent_grid[2];
        if c > 3 {
            return Err(Error::Config("toy codec supports at most 3 latent channels".into()));
        }
        let mut mix = gaussian(3, c, 0.2, cfg.seed, "toy-codec-mix");
        for i in 0..c {
            mix[i * c + i] += 1.0;
        }
        // (MᵀM)⁻¹Mᵀ by Gauss-Jordan on the C×C normal matrix.
        let mtm = crate::linalg::matmul(&crate::linalg::transpose(&mix, 3, c), c, 3, &mix, c);
        let inv = invert(&mtm, c)?;
        let unmix = crate::linalg::matmul(&inv, c, c, &crate::linalg::transpose(&mix, 3, c), 3);
        Ok(Self {
            grid: cfg.latent_grid,
            scale: cfg.image_scale,
            mix,
            unmix,
        })
    }

    fn image_dims(&self) -> [usize; 3] {
        [self.grid[0] * self.scale, self.grid[1] * self.scale, 3]
    }
}

fn invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| libm::fabs(a[x * n + col]).total_cmp(&libm::fabs(a[y * n + col])))
            .expect("non-empty range");
        if libm::fabs(a[pivot * n + col]) < 1e-12 {
            return Err(Error::Singularity("toy codec mix".into()));
        }
        for k in 0..n {
            a.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let p = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                for k in 0..n {
                    a[r * n + k] -= f * a[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    Ok(inv)
}

impl Component for ToyImageCodec {
    fn id(&self) -> String {
        "toy-image-codec/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        digest_f64("toy-image-codec", &[&self.mix, &[self.scale as f64]])
    }
}

impl ImageCodec for ToyImageCodec {
    fn latent_shape(&self) -> [usize; 3] {
        self.grid
    }
    fn image_shape(&self) -> [usize; 3] {
        self.image_dims()
    }
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let [ih, iw, _] = self.image_dims();
        check_image(image, [ih, iw, 3], "toy codec image")?;
        let [h, w, c] = self.grid;
        let s = self.scale;
        let area = (s * s) as f64;
        let x = image.data();
        let mut out = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let mut avg = [0.0; 3];
                for a in 0..s {
                    for b in 0..s {
                        let base = ((i * s + a) * iw + (j * s + b)) * 3;
                        for ch in 0..3 {
                            avg[ch] += x[base + ch];
                        }
                    }
                }
                avg.iter_mut().for_each(|v| *v /= area);
                let z = matvec(&self.unmix, c, 3, &avg);
                out[(i * w + j) * c..(i * w + j + 1) * c].copy_from_slice(&z);
            }
        }
        Tensor::new(self.grid, out)
    }
    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        latent.ensure_shape(&self.grid, "toy codec latent")?;
        let [h, w, c] = self.grid;
        let [ih, iw, _] = self.image_dims();
        let s = self.scale;
        let mut out = vec![0.0; ih * iw * 3];
        for i in 0..h {
            for j in 0..w {
                let z = &latent.data()[(i * w + j) * c..(i * w + j + 1) * c];
                let rgb = matvec(&self.mix, 3, c, z);
                for a in 0..s {
                    for b in 0..s {
                        let base = ((i * s + a) * iw + (j * s + b)) * 3;
                        out[base..base + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        Tensor::new([ih, iw, 3], out)
    }
    fn decode_backward(&self, latent: &Tensor, d_image: &Tensor) -> Result<Tensor> {
        latent.ensure_shape(&self.grid, "toy codec latent")?;
        let [ih, iw, _] = self.image_dims();
        d_image.ensure_shape(&[ih, iw, 3], "toy codec image gradient")?;
        let [h, w, c] = self.grid;
        let s = self.scale;
        let mut out = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let mut acc = [0.0; 3];
                for a in 0..s {
                    for b in 0..s {
                        let base = ((i * s + a) * iw + (j * s + b)) * 3;
                        for ch in 0..3 {
                            acc[ch] += d_image.data()[base + ch];
                        }
                    }
                }
                let dz = matvec_t(&self.mix, 3, c, &acc);
                out[(i * w + j) * c..(i * w + j + 1) * c].copy_from_slice(&dz);
            }
        }
        Tensor::new(self.grid, out)
    }
}

// ---------------------------------------------------------------------------

/// `normalize(P·(x − mean(x)))`; constant images carry no face.
#[derive(Clone, Debug)]
pub struct ToyFaceEmbedder {
    image_shape: [usize; 3],
    dim: usize,
    proj: Vec<f64>,
}

/// Below this centered-projection norm the image is treated as blank.
const TOY_FACE_MIN_NORM: f64 = 1e-9;

impl ToyFaceEmbedder {
    pub fn new(cfg: &ToyBackendConfig) -> Self {
        let n = cfg.image_numel();
        Self {
            image_shape: cfg.image_shape(),
            dim: cfg.face_dim,
            proj: gaussian(cfg.face_dim, n, 1.0 / libm::sqrt(n as f64), cfg.seed, "toy-face-proj"),
        }
    }

    fn project(&self, image: &Tensor) -> Result<(Vec<f64>, f64)> {
        check_image(image, self.image_shape, "toy face embedder input")?;
        let x = image.data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let u = matvec(&self.proj, self.dim, x.len(), &centered);
        let n = norm(&u);
        if n <= TOY_FACE_MIN_NORM * (1.0 + norm(x)) {
            return Err(Error::FaceNotDetected("toy face embedder input".into()));
        }
        Ok((u, n))
    }
}

impl Component for ToyFaceEmbedder {
    fn id(&self) -> String {
        "toy-face-embedder/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        digest_f64("toy-face-embedder", &[&self.proj])
    }
}

impl FaceEmbedder for ToyFaceEmbedder {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }
    fn embedding_dim(&self) -> usize {
        self.dim
    }
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (u, n) = self.project(image)?;
        Ok(u.into_iter().map(|v| v / n).collect())
    }
    fn embed_backward(&self, image: &Tensor, d_embedding: &[f64]) -> Result<Tensor> {
        if d_embedding.len() != self.dim {
            return Err(Error::dim("face embedding gradient", &[self.dim], &[d_embedding.len()]));
        }
        let (u, n) = self.project(image)?;
        let e: Vec<f64> = u.iter().map(|v| v / n).collect();
        let radial = dot(&e, d_embedding);
        let du: Vec<f64> = d_embedding
            .iter()
            .zip(&e)
            .map(|(g, ei)| (g - radial * ei) / n)
            .collect();
        let dc = matvec_t(&self.proj, self.dim, image.len(), &du);
        let mean = dc.iter().sum::<f64>() / dc.len() as f64;
        Tensor::new(self.image_shape, dc.into_iter().map(|v| v - mean).collect())
    }
}

// ---------------------------------------------------------------------------

/// Vertical stripes, one per instance; hard 0/1 or Gaussian-soft.
#[derive(Clone, Debug)]
pub struct ToySegmenter {
    image_shape: [usize; 3],
    instances: usize,
    soft: bool,
}

impl ToySegmenter {
    pub fn new(cfg: &ToyBackendConfig) -> Self {
        Self {
            image_shape: cfg.image_shape(),
            instances: cfg.instances,
            soft: cfg.soft_masks,
        }
    }
}

impl Component for ToySegmenter {
    fn id(&self) -> String {
        format!(
            "toy-segmenter/v1/{}{}",
            self.instances,
            if self.soft { "-soft" } else { "" }
        )
    }
    fn weights_digest(&self) -> [u8; 32] {
        digest_f64("toy-segmenter", &[&[self.instances as f64, self.soft as u8 as f64]])
    }
}

impl Segmenter for ToySegmenter {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }
    fn segment(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        check_image(image, self.image_shape, "toy segmenter input")?;
        let [h, w, _] = self.image_shape;
        let n = self.instances;
        Ok((0..n)
            .map(|k| {
                Tensor::from_fn([h, w], |p| {
                    let x = p % w;
                    if self.soft {
                        let center = (k as f64 + 0.5) * w as f64 / n as f64;
                        let sigma = w as f64 / (2.0 * n as f64);
                        let dx = x as f64 + 0.5 - center;
                        0.9 * libm::exp(-dx * dx / (2.0 * sigma * sigma))
                    } else if x * n / w == k {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------

/// Cosine between a projected image and the mean of hashed word vectors.
#[derive(Clone, Debug)]
pub struct ToyClipScorer {
    seed: u64,
    image_shape: [usize; 3],
    dim: usize,
    proj: Vec<f64>,
}

impl ToyClipScorer {
    pub fn new(cfg: &ToyBackendConfig) -> Self {
        let n = cfg.image_numel();
        Self {
            seed: cfg.seed,
            image_shape: cfg.image_shape(),
            dim: cfg.clip_dim,
            proj: gaussian(cfg.clip_dim, n, 1.0 / libm::sqrt(n as f64), cfg.seed, "toy-clip-image"),
        }
    }

    pub fn image_features(&self, image: &Tensor) -> Result<Vec<f64>> {
        check_image(image, self.image_shape, "toy clip image")?;
        Ok(matvec(&self.proj, self.dim, image.len(), image.data()))
    }

    pub fn text_features(&self, text: &str) -> Result<Vec<f64>> {
        let ws = words(text);
        if ws.is_empty() {
            return Err(Error::invalid("clip text is empty"));
        }
        let mut acc = vec![0.0; self.dim];
        for w in &ws {
            let mut rng = rng::indexed_stream(self.seed, "toy-clip-vocab", fnv1a(w.as_bytes()));
            for a in acc.iter_mut() {
                *a += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = ws.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }
}

impl Component for ToyClipScorer {
    fn id(&self) -> String {
        "toy-clip/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        digest_f64("toy-clip", &[&self.proj, &[self.seed as f64]])
    }
}

impl ClipScorer for ToyClipScorer {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }
    fn score(&self, image: &Tensor, text: &str) -> Result<f64> {
        let a = self.image_features(image)?;
        let b = self.text_features(text)?;
        let denom = norm(&a) * norm(&b);
        if denom == 0.0 {
            return Err(Error::Backend("toy clip features have zero norm".into()));
        }
        Ok((dot(&a, &b) / denom).clamp(-1.0, 1.0))
    }
}

/// Mean squared difference of fixed random features.
#[derive(Clone, Debug)]
pub struct ToyLpips {
    image_shape: [usize; 3],
    features: usize,
    proj: Vec<f64>,
}

impl ToyLpips {
    pub fn new(cfg: &ToyBackendConfig) -> Self {
        let n = cfg.image_numel();
        let features = 16;
        Self {
            image_shape: cfg.image_shape(),
            features,
            proj: gaussian(features, n, 1.0 / libm::sqrt(n as f64), cfg.seed, "toy-lpips"),
        }
    }
}

impl Component for ToyLpips {
    fn id(&self) -> String {
        "toy-lpips/v1".into()
    }
    fn weights_digest(&self) -> [u8; 32] {
        digest_f64("toy-lpips", &[&self.proj])
    }
}

impl LpipsScorer for ToyLpips {
    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        check_image(a, self.image_shape, "lpips input")?;
        check_image(b, self.image_shape, "lpips input")?;
        let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let f = matvec(&self.proj, self.features, diff.len(), &diff);
        Ok(f.iter().map(|v| v * v).sum::<f64>() / self.features as f64)
    }
}

//! Interfaces to the pretrained models the toolkit consumes.
//!
//! Each model sits behind a trait; a [`BackendBundle`] ties one
//! implementation of each together and checks that their advertised shapes
//! agree. The differentiable components (text encoder, denoiser, image
//! codec, face embedder) expose vector-Jacobian products so the adaptor and
//! LoRA deltas can be trained through them while their own weights stay
//! frozen.

pub mod toy;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::latent::{WPlusLatent, WPlusShape};
use crate::lora::Adaptation;
use crate::losses::NoiseSchedule;
use crate::{Error, Result, Tensor};

/// Identity and weight checksum of a backend component.
pub trait Component: Send + Sync {
    /// Stable identifier, e.g. `"toy-denoiser/v1"`.
    fn id(&self) -> String;
    /// Checksum of the component's frozen weights.
    fn weights_digest(&self) -> [u8; 32];
    /// Whether concurrent calls are safe. Non-reentrant components are
    /// serialized by the bundle loader.
    fn reentrant(&self) -> bool {
        true
    }
}

/// Image → W+ inversion encoder.
pub trait GanEncoder: Component {
    fn image_shape(&self) -> [usize; 3];
    fn wplus_shape(&self) -> WPlusShape;
    fn encode(&self, image: &Tensor) -> Result<WPlusLatent>;
}

/// A prompt as a sequence of plain text and injected token embeddings.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Prompt {
    pieces: Vec<PromptPiece>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptPiece {
    Text(String),
    /// Embeddings substituted directly at this position, one token each.
    Tokens(Vec<Vec<f64>>),
}

impl Prompt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(s: impl Into<String>) -> Self {
        let mut p = Self::new();
        p.push_text(s);
        p
    }

    pub fn push_text(&mut self, s: impl Into<String>) {
        self.pieces.push(PromptPiece::Text(s.into()));
    }

    pub fn push_tokens(&mut self, tokens: Vec<Vec<f64>>) {
        self.pieces.push(PromptPiece::Tokens(tokens));
    }

    pub fn pieces(&self) -> &[PromptPiece] {
        &self.pieces
    }

    /// Number of injected embedding vectors.
    pub fn injected_count(&self) -> usize {
        self.pieces
            .iter()
            .map(|p| match p {
                PromptPiece::Tokens(t) => t.len(),
                PromptPiece::Text(_) => 0,
            })
            .sum()
    }
}

/// Text encoder with embedding substitution.
pub trait TextEncoder: Component {
    /// Width of input token embeddings.
    fn token_dim(&self) -> usize;
    /// `[sequence, width]` of the produced conditioning.
    fn conditioning_shape(&self) -> [usize; 2];
    /// Input embedding of a single vocabulary word.
    fn token_embedding(&self, word: &str) -> Result<Vec<f64>>;
    fn encode(&self, prompt: &Prompt) -> Result<Tensor>;
    /// Gradient for each injected embedding, in prompt order.
    fn backward(&self, prompt: &Prompt, d_conditioning: &Tensor) -> Result<Vec<Vec<f64>>>;
}

/// A projection matrix that accepts LoRA deltas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraTarget {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionControl<'a> {
    /// Compute self-attention from the current latent.
    Compute,
    /// Use previously captured maps in place of the computed ones.
    Inject(&'a [Tensor]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    /// Self-attention maps actually used, one per exposed layer.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserGrads {
    pub d_conditioning: Tensor,
    /// Gradient with respect to each effective (LoRA-composed) target matrix.
    pub d_targets: Vec<(String, Tensor)>,
}

/// Noise predictor `ε_θ(z, t, c)`.
pub trait Denoiser: Component {
    fn latent_shape(&self) -> [usize; 3];
    fn conditioning_shape(&self) -> [usize; 2];
    fn timesteps(&self) -> usize;
    fn lora_targets(&self) -> Vec<LoraTarget>;
    fn predict(
        &self,
        latent: &Tensor,
        t: usize,
        conditioning: &Tensor,
        adaptation: &Adaptation<'_>,
        attention: AttentionControl<'_>,
    ) -> Result<DenoiserOutput>;
    /// Vector-Jacobian product of `predict` with respect to the conditioning
    /// and the effective target matrices. The latent is treated as constant.
    fn backward(
        &self,
        latent: &Tensor,
        t: usize,
        conditioning: &Tensor,
        adaptation: &Adaptation<'_>,
        attention: AttentionControl<'_>,
        d_eps: &Tensor,
    ) -> Result<DenoiserGrads>;
}

/// Latent ↔ image autoencoder.
pub trait ImageCodec: Component {
    fn latent_shape(&self) -> [usize; 3];
    fn image_shape(&self) -> [usize; 3];
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
    fn decode_backward(&self, latent: &Tensor, d_image: &Tensor) -> Result<Tensor>;
}

/// Face recognition embedding with unit norm.
pub trait FaceEmbedder: Component {
    fn image_shape(&self) -> [usize; 3];
    fn embedding_dim(&self) -> usize;
    /// Fails with [`Error::FaceNotDetected`] when no face is found.
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>>;
    fn embed_backward(&self, image: &Tensor, d_embedding: &[f64]) -> Result<Tensor>;
}

/// Instance segmentation into soft `[H, W]` masks.
pub trait Segmenter: Component {
    fn image_shape(&self) -> [usize; 3];
    fn segment(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

/// Image-text similarity in `[-1, 1]`.
pub trait ClipScorer: Component {
    fn image_shape(&self) -> [usize; 3];
    fn score(&self, image: &Tensor, text: &str) -> Result<f64>;
}

/// Perceptual distance, `≥ 0`.
pub trait LpipsScorer: Component {
    fn image_shape(&self) -> [usize; 3];
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64>;
}

/// Shapes a bundle configuration declares up front.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeclaredShapes {
    pub wplus_shape: WPlusShape,
    pub token_dim: usize,
    pub timesteps: usize,
}

/// One implementation of every backend component.
#[derive(Clone)]
pub struct BackendParts {
    pub gan_encoder: Arc<dyn GanEncoder>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub denoiser: Arc<dyn Denoiser>,
    pub image_codec: Arc<dyn ImageCodec>,
    pub face_embedder: Arc<dyn FaceEmbedder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub clip_scorer: Arc<dyn ClipScorer>,
    pub lpips_scorer: Arc<dyn LpipsScorer>,
    pub schedule: NoiseSchedule,
}

/// A validated set of backends with its fingerprint.
#[derive(Clone)]
pub struct BackendBundle {
    pub gan_encoder: Arc<dyn GanEncoder>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub denoiser: Arc<dyn Denoiser>,
    pub image_codec: Arc<dyn ImageCodec>,
    pub face_embedder: Arc<dyn FaceEmbedder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub clip_scorer: Arc<dyn ClipScorer>,
    pub lpips_scorer: Arc<dyn LpipsScorer>,
    pub schedule: NoiseSchedule,
    fingerprint: String,
}

impl core::fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("BackendBundle")
            .field("denoiser", &self.denoiser.id())
            .field("text_encoder", &self.text_encoder.id())
            .field("fingerprint", &self.fingerprint)
            .finish_non_exhaustive()
    }
}

fn conflict(a: &str, av: impl core::fmt::Debug, b: &str, bv: impl core::fmt::Debug) -> Error {
    Error::Validation(format!("{a} advertises {av:?} but {b} advertises {bv:?}"))
}

impl BackendBundle {
    /// Cross-checks every component's shapes and computes the fingerprint.
    pub fn assemble(parts: BackendParts, declared: Option<&DeclaredShapes>) -> Result<Self> {
        let BackendParts {
            gan_encoder,
            text_encoder,
            denoiser,
            image_codec,
            face_embedder,
            segmenter,
            clip_scorer,
            lpips_scorer,
            schedule,
        } = parts;

        if let Some(d) = declared {
            if gan_encoder.wplus_shape() != d.wplus_shape {
                return Err(conflict(
                    "bundle wplus_shape",
                    d.wplus_shape.as_array(),
                    "gan_encoder",
                    gan_encoder.wplus_shape().as_array(),
                ));
            }
            if text_encoder.token_dim() != d.token_dim {
                return Err(conflict(
                    "bundle token_dim",
                    d.token_dim,
                    "text_encoder token_dim",
                    text_encoder.token_dim(),
                ));
            }
            if schedule.timesteps() != d.timesteps {
                return Err(conflict(
                    "bundle timesteps",
                    d.timesteps,
                    "schedule",
                    schedule.timesteps(),
                ));
            }
        }
        if denoiser.timesteps() != schedule.timesteps() {
            return Err(conflict(
                "denoiser timesteps",
                denoiser.timesteps(),
                "schedule",
                schedule.timesteps(),
            ));
        }
        if text_encoder.conditioning_shape() != denoiser.conditioning_shape() {
            return Err(conflict(
                "text_encoder conditioning",
                text_encoder.conditioning_shape(),
                "denoiser conditioning",
                denoiser.conditioning_shape(),
            ));
        }
        if denoiser.latent_shape() != image_codec.latent_shape() {
            return Err(conflict(
                "denoiser latent",
                denoiser.latent_shape(),
                "image_codec latent",
                image_codec.latent_shape(),
            ));
        }
        let image = image_codec.image_shape();
        for (name, shape) in [
            ("gan_encoder", gan_encoder.image_shape()),
            ("face_embedder", face_embedder.image_shape()),
            ("segmenter", segmenter.image_shape()),
            ("clip_scorer", clip_scorer.image_shape()),
            ("lpips_scorer", lpips_scorer.image_shape()),
        ] {
            if shape != image {
                return Err(conflict("image_codec image", image, &format!("{name} image"), shape));
            }
        }

        let mut hasher = Sha256::new();
        let components: [(&str, &dyn Component); 8] = [
            ("gan_encoder", &*gan_encoder),
            ("text_encoder", &*text_encoder),
            ("denoiser", &*denoiser),
            ("image_codec", &*image_codec),
            ("face_embedder", &*face_embedder),
            ("segmenter", &*segmenter),
            ("clip_scorer", &*clip_scorer),
            ("lpips_scorer", &*lpips_scorer),
        ];
        for (slot, c) in components {
            hasher.update(slot.as_bytes());
            hasher.update([0]);
            hasher.update(c.id().as_bytes());
            hasher.update([0]);
            hasher.update(c.weights_digest());
        }
        for a in schedule.alpha_bars() {
            hasher.update(a.to_bits().to_le_bytes());
        }
        let fingerprint = hex(&hasher.finalize());

        Ok(Self {
            gan_encoder,
            text_encoder,
            denoiser,
            image_codec,
            face_embedder,
            segmenter,
            clip_scorer,
            lpips_scorer,
            schedule,
            fingerprint,
        })
    }

    /// Hex SHA-256 over component identifiers, weight checksums and the
    /// noise schedule.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn timesteps(&self) -> usize {
        self.schedule.timesteps()
    }

    pub fn wplus_shape(&self) -> WPlusShape {
        self.gan_encoder.wplus_shape()
    }

    pub fn token_dim(&self) -> usize {
        self.text_encoder.token_dim()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.denoiser.latent_shape()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_codec.image_shape()
    }
}

/// Lowercase hex encoding.
pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// SHA-256 of a sequence of `f64` buffers (bit patterns, little-endian).
pub fn digest_f64(label: &str, buffers: &[&[f64]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    for b in buffers {
        hasher.update((b.len() as u64).to_le_bytes());
        for x in *b {
            hasher.update(x.to_bits().to_le_bytes());
        }
    }
    hasher.finalize().into()
}

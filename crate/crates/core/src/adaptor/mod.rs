//! The latent adaptor: maps a W+ code and a diffusion timestep to the pair of
//! token embeddings that stand in for the subject in the text pathway.
//!
//! Architecture, in evaluation order:
//!
//! 1. one multi-head self-attention block over the `L` rows of `w`
//!    (residual connection), flattened to `L·D` features;
//! 2. the timestep through Fourier features and a small MLP;
//! 3. both concatenated and passed through a SiLU MLP trunk;
//! 4. two linear heads producing `v¹_t` and `v²_t`.
//!
//! Gradients are computed by a hand-written reverse pass in [`forward`];
//! [`AdaptorWeights`] doubles as the gradient accumulator.

mod forward;
mod weights;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::latent::{WPlusLatent, WPlusShape};
use crate::{round_f32, Error, Result};

pub use forward::{backward, forward, forward_with_cache, ForwardCache};
pub use weights::{AdaptorWeights, Linear};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptorConfig {
    pub wplus_shape: WPlusShape,
    /// Width of the text encoder's token embeddings.
    pub token_dim: usize,
    /// Number of Fourier frequency bands for the timestep.
    pub pe_bands: usize,
    pub attn_heads: usize,
    /// Linear layers after the concat, counting the output heads.
    pub mlp_layers: usize,
    pub time_mlp_layers: usize,
    /// Number of diffusion timesteps `T`; valid timesteps are `1..=T`.
    pub max_timestep: usize,
    pub hidden_width: usize,
    pub time_width: usize,
}

impl AdaptorConfig {
    /// Stable-Diffusion-2.1 sized adaptor over an 18×512 W+ code.
    pub fn production() -> Self {
        Self::new(WPlusShape::FFHQ_1024, 1024, 1000)
    }

    /// The desk-scale configuration matching the toy backend.
    pub fn toy() -> Self {
        Self {
            pe_bands: 4,
            ..Self::new(WPlusShape { layers: 3, dims: 8 }, 16, 10)
        }
    }

    /// Defaults for everything but the shapes: 4 heads, a 4-layer MLP of
    /// width `2·token_dim` and a 2-layer timestep MLP.
    pub fn new(wplus_shape: WPlusShape, token_dim: usize, max_timestep: usize) -> Self {
        Self {
            wplus_shape,
            token_dim,
            pe_bands: 8,
            attn_heads: 4,
            mlp_layers: 4,
            time_mlp_layers: 2,
            max_timestep,
            hidden_width: 2 * token_dim,
            time_width: token_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("wplus layers", self.wplus_shape.layers),
            ("wplus dims", self.wplus_shape.dims),
            ("token_dim", self.token_dim),
            ("pe_bands", self.pe_bands),
            ("attn_heads", self.attn_heads),
            ("mlp_layers", self.mlp_layers),
            ("time_mlp_layers", self.time_mlp_layers),
            ("max_timestep", self.max_timestep),
            ("hidden_width", self.hidden_width),
            ("time_width", self.time_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("adaptor {name} must be ≥ 1")));
            }
        }
        if !self.wplus_shape.dims.is_multiple_of(self.attn_heads) {
            return Err(Error::invalid(format!(
                "W+ width {} is not divisible by {} attention heads",
                self.wplus_shape.dims, self.attn_heads
            )));
        }
        Ok(())
    }

    /// Canonical byte encoding used for fingerprints.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(80);
        for v in [
            self.wplus_shape.layers,
            self.wplus_shape.dims,
            self.token_dim,
            self.pe_bands,
            self.attn_heads,
            self.mlp_layers,
            self.time_mlp_layers,
            self.max_timestep,
            self.hidden_width,
            self.time_width,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.max_timestep {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.max_timestep
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingPair {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub timestep: usize,
}

impl TokenEmbeddingPair {
    fn to_f32_precision(&self) -> Self {
        Self {
            v1: self.v1.iter().map(|&x| round_f32(x)).collect(),
            v2: self.v2.iter().map(|&x| round_f32(x)).collect(),
            timestep: self.timestep,
        }
    }
}

/// One token pair per timestep `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingSchedule {
    pairs: Vec<TokenEmbeddingPair>,
}

impl TokenEmbeddingSchedule {
    pub fn new(pairs: Vec<TokenEmbeddingPair>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::invalid("token schedule is empty"));
        };
        let dim = first.v1.len();
        for (i, p) in pairs.iter().enumerate() {
            if p.timestep != i + 1 {
                return Err(Error::invalid(format!(
                    "token schedule entry {i} has timestep {} (expected {})",
                    p.timestep,
                    i + 1
                )));
            }
            if p.v1.len() != dim || p.v2.len() != dim {
                return Err(Error::dim(
                    format!("token schedule entry {i}"),
                    &[dim, dim],
                    &[p.v1.len(), p.v2.len()],
                ));
            }
            if p.v1.iter().chain(&p.v2).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "token schedule entry {i} is not finite"
                )));
            }
        }
        Ok(Self { pairs })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.pairs[0].v1.len()
    }

    pub fn pair(&self, t: usize) -> Result<&TokenEmbeddingPair> {
        if t == 0 || t > self.pairs.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.pairs.len()
            )));
        }
        Ok(&self.pairs[t - 1])
    }

    pub fn pairs(&self) -> &[TokenEmbeddingPair] {
        &self.pairs
    }

    pub fn to_f32_precision(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(TokenEmbeddingPair::to_f32_precision).collect(),
        }
    }
}

/// Fourier features of `t/T`: `sin(2^k π t/T)` for `k < bands`, then the
/// matching cosines.
pub fn positional_encode(t: usize, pe_bands: usize, max_timestep: usize) -> Result<Vec<f64>> {
    if pe_bands == 0 {
        return Err(Error::invalid("pe_bands must be ≥ 1"));
    }
    if max_timestep == 0 || t > max_timestep {
        return Err(Error::invalid(format!(
            "timestep {t} outside [0, {max_timestep}]"
        )));
    }
    let phase = core::f64::consts::PI * t as f64 / max_timestep as f64;
    let mut out = alloc::vec![0.0; 2 * pe_bands];
    for k in 0..pe_bands {
        let arg = libm::ldexp(phase, k as i32);
        out[k] = libm::sin(arg);
        out[pe_bands + k] = libm::cos(arg);
    }
    Ok(out)
}

/// Runs the adaptor at every timestep `1..=T`.
pub fn embed_all_timesteps(weights: &AdaptorWeights, w: &WPlusLatent) -> Result<TokenEmbeddingSchedule> {
    let pairs = (1..=weights.config().max_timestep)
        .map(|t| forward(weights, w, t))
        .collect::<Result<Vec<_>>>()?;
    TokenEmbeddingSchedule::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_at_zero() {
        let pe = positional_encode(0, 5, 10).unwrap();
        assert!(pe[..5].iter().all(|&x| x == 0.0));
        assert!(pe[5..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn encode_at_t_max_single_band() {
        let pe = positional_encode(10, 1, 10).unwrap();
        assert!(pe[0].abs() < 1e-9);
        assert_eq!(pe[1], -1.0);
    }

    #[test]
    fn encode_midpoint_against_direct_trig() {
        let pe = positional_encode(5, 3, 10).unwrap();
        // 2^k·π·(1/2): π/2, π, 2π
        let expected = [1.0, 0.0, 0.0, 0.0, -1.0, 1.0];
        for (a, b) in pe.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{pe:?}");
        }
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(positional_encode(11, 2, 10).is_err());
        assert!(positional_encode(3, 0, 10).is_err());
    }

    #[test]
    fn config_validation() {
        AdaptorConfig::toy().validate().unwrap();
        AdaptorConfig::production().validate().unwrap();
        let mut bad = AdaptorConfig::toy();
        bad.attn_heads = 3;
        assert!(bad.validate().is_err());
        bad.attn_heads = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_rejects_gaps() {
        let p = |t| TokenEmbeddingPair {
            v1: alloc::vec![0.0; 2],
            v2: alloc::vec![0.0; 2],
            timestep: t,
        };
        assert!(TokenEmbeddingSchedule::new(alloc::vec![p(1), p(3)]).is_err());
        assert!(TokenEmbeddingSchedule::new(alloc::vec![p(2)]).is_err());
        assert_eq!(TokenEmbeddingSchedule::new(alloc::vec![p(1), p(2)]).unwrap().len(), 2);
    }
}

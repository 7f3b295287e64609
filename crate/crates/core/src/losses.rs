//! Training objective: diffusion, regularization and identity terms, their
//! weighted sum, and the closed-form clean-image estimate used by the
//! identity term.
//!
//! Every squared-error term is mean-reduced so the default weights carry over
//! between tensor sizes.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adaptor::TokenEmbeddingPair;
use crate::backend::FaceEmbedder;
use crate::{Error, Result, Tensor};

/// Cumulative noise levels `ᾱ_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(rename = "T")]
    timesteps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::invalid("noise schedule is empty"));
        }
        for (i, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!(
                    "alpha_bar[{i}] = {a} is outside (0, 1]"
                )));
            }
            if i > 0 && a > alpha_bar[i - 1] {
                return Err(Error::invalid(format!(
                    "alpha_bar increases at index {i}"
                )));
            }
        }
        Ok(Self {
            timesteps: alpha_bar.len(),
            alpha_bar,
        })
    }

    /// Betas linear in `[beta_start, beta_end]`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_betas(timesteps, |i, n| beta_start + (beta_end - beta_start) * i as f64 / n)
    }

    /// Betas linear in square-root space (the Stable Diffusion schedule).
    pub fn scaled_linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let (s, e) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
        Self::from_betas(timesteps, |i, n| {
            let b = s + (e - s) * i as f64 / n;
            b * b
        })
    }

    fn from_betas(timesteps: usize, beta: impl Fn(usize, f64) -> f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("noise schedule needs at least one timestep"));
        }
        let n = (timesteps.max(2) - 1) as f64;
        let mut acc = 1.0;
        let alpha_bar = (0..timesteps)
            .map(|i| {
                acc *= 1.0 - beta(i, n);
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    /// Ten steps, betas 0.02 → 0.4.
    pub fn toy() -> Self {
        Self::linear(10, 0.02, 0.4).expect("toy schedule is valid")
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.timesteps => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.timesteps
            ))),
        }
    }

    /// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let (s, n) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        x0.zip_with(eps, "add_noise", |x, e| s * x + n * e)
    }

    /// Deterministic DDIM update from `t` to `t_prev < t`.
    pub fn ddim_step(&self, x_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
        if t_prev >= t {
            return Err(Error::invalid(format!("DDIM step {t} → {t_prev} is not decreasing")));
        }
        let x0 = ddim_x0(&DiffusionLatent::new(x_t.clone(), t), eps, self)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let (s, n) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
        x0.zip_with(eps, "ddim_step", |x, e| s * x + n * e)
    }

    /// `steps` timesteps evenly spread over `T..=1`, descending.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.timesteps {
            return Err(Error::invalid(format!(
                "sampling steps {steps} outside [1, {}]",
                self.timesteps
            )));
        }
        Ok((0..steps)
            .map(|k| self.timesteps - k * self.timesteps / steps)
            .collect())
    }
}

/// A noised latent together with its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionLatent {
    pub data: Tensor,
    pub timestep: usize,
}

impl DiffusionLatent {
    pub fn new(data: Tensor, timestep: usize) -> Self {
        Self { data, timestep }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_id: f64,
}

impl LossWeights {
    pub fn new(lambda_reg: f64, lambda_id: f64) -> Result<Self> {
        for (name, v) in [("lambda_reg", lambda_reg), ("lambda_id", lambda_id)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(Self {
            lambda_reg,
            lambda_id,
        })
    }
}

impl Default for LossWeights {
    /// `λ_reg = 1e-7`, `λ_ID = 1.0`.
    fn default() -> Self {
        Self {
            lambda_reg: 1e-7,
            lambda_id: 1.0,
        }
    }
}

fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    eps_pred.ensure_shape(eps_true.shape(), "diffusion_loss")?;
    Ok(mse_slices(eps_true.data(), eps_pred.data()))
}

/// `∂ diffusion_loss / ∂ eps_pred`.
pub fn diffusion_loss_grad(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    let n = eps_true.len().max(1) as f64;
    eps_pred.zip_with(eps_true, "diffusion_loss", |p, t| 2.0 * (p - t) / n)
}

/// Mean over both tokens of the per-dimension squared distance to `v_cls`.
pub fn reg_loss(pair: &TokenEmbeddingPair, v_cls: &[f64]) -> Result<f64> {
    check_token_dims(pair, v_cls)?;
    Ok(0.5 * (mse_slices(&pair.v1, v_cls) + mse_slices(&pair.v2, v_cls)))
}

/// `(∂L_reg/∂v¹, ∂L_reg/∂v²)`.
pub fn reg_loss_grad(pair: &TokenEmbeddingPair, v_cls: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_token_dims(pair, v_cls)?;
    let d = v_cls.len() as f64;
    let g = |v: &[f64]| v.iter().zip(v_cls).map(|(x, c)| (x - c) / d).collect();
    Ok((g(&pair.v1), g(&pair.v2)))
}

fn check_token_dims(pair: &TokenEmbeddingPair, v_cls: &[f64]) -> Result<()> {
    if pair.v1.len() != v_cls.len() || pair.v2.len() != v_cls.len() {
        return Err(Error::dim(
            "reg_loss",
            &[v_cls.len(), v_cls.len()],
            &[pair.v1.len(), pair.v2.len()],
        ));
    }
    Ok(())
}

/// Clean-latent estimate `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn ddim_x0(x_t: &DiffusionLatent, eps_pred: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(x_t.timestep)?;
    if ab == 0.0 {
        return Err(Error::Singularity(format!(
            "alpha_bar at timestep {} is zero",
            x_t.timestep
        )));
    }
    let (s, n) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x_t.data.zip_with(eps_pred, "ddim_x0", |x, e| (x - n * e) / s)
}

/// `∂x̂₀/∂ε̂` as a scalar, `−√(1−ᾱ_t)/√ᾱ_t`.
pub fn ddim_x0_eps_scale(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    Ok(-libm::sqrt(1.0 - ab) / libm::sqrt(ab))
}

/// Mean squared error between face embeddings of two images.
pub fn id_loss(image_pred: &Tensor, image_ref: &Tensor, embedder: &dyn FaceEmbedder) -> Result<f64> {
    let e_pred = embedder.embed(image_pred)?;
    let e_ref = embedder.embed(image_ref)?;
    embedding_mse(&e_pred, &e_ref)
}

pub(crate) fn embedding_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("id_loss embeddings", &[a.len()], &[b.len()]));
    }
    Ok(mse_slices(a, b))
}

/// `L_diff + λ_reg·L_reg + λ_ID·L_ID`.
pub fn total_loss(l_diff: f64, l_reg: f64, l_id: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_diff", l_diff), ("l_reg", l_reg), ("l_id", l_id)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{name} = {v} must be finite and ≥ 0")));
        }
    }
    Ok(l_diff + weights.lambda_reg * l_reg + weights.lambda_id * l_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn perfect_prediction_and_unit_error() {
        let a = Tensor::from_fn([8], |i| i as f64);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(
            diffusion_loss(&Tensor::zeros([8]), &Tensor::filled([8], 1.0)).unwrap(),
            1.0
        );
        assert!(matches!(
            diffusion_loss(&Tensor::zeros([8]), &Tensor::zeros([4, 2])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn reg_loss_unit_offset() {
        let v_cls: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let mut v1 = v_cls.clone();
        v1[3] += 1.0;
        let pair = TokenEmbeddingPair {
            v1,
            v2: v_cls.clone(),
            timestep: 1,
        };
        assert_eq!(reg_loss(&pair, &v_cls).unwrap(), 0.5 * (1.0 / 16.0));
        let same = TokenEmbeddingPair {
            v1: v_cls.clone(),
            v2: v_cls.clone(),
            timestep: 1,
        };
        assert_eq!(reg_loss(&same, &v_cls).unwrap(), 0.0);
        assert!(reg_loss(&same, &v_cls[..4]).is_err());
    }

    #[test]
    fn ddim_limits() {
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let x = Tensor::from_fn([3], |i| i as f64 + 0.5);
        let eps = Tensor::filled([3], 7.0);
        assert_eq!(ddim_x0(&DiffusionLatent::new(x.clone(), 1), &eps, &sched).unwrap(), x);
        let out = ddim_x0(
            &DiffusionLatent::new(Tensor::filled([4], 1.0), 2),
            &Tensor::zeros([4]),
            &sched,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn total_loss_defaults() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 0.0, 0.0, &w).unwrap(), 1.0);
        assert_eq!(total_loss(0.5, 2.0, 0.25, &w).unwrap(), 0.5 + 2e-7 + 0.25);
        assert!(total_loss(-1.0, 0.0, 0.0, &w).is_err());
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::from_alpha_bar(vec![]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.9]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.0]).is_err());
        let toy = NoiseSchedule::toy();
        assert_eq!(toy.timesteps(), 10);
        assert!(toy.alpha_bars().windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(toy.sampling_timesteps(10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(toy.sampling_timesteps(5).unwrap(), vec![10, 8, 6, 4, 2]);
    }
}

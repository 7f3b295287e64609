use alloc::vec;
use alloc::vec::Vec;

use super::{positional_encode, AdaptorWeights, TokenEmbeddingPair};
use crate::latent::WPlusLatent;
use crate::linalg::sigmoid;
use crate::{Error, Result};

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Intermediate activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Row-stochastic attention per head, `heads × L × L`.
    probs: Vec<f64>,
    /// Concatenated head outputs, `L × D`.
    attended: Vec<f64>,
    /// Inputs of each time layer, then its pre-activation.
    time_inputs: Vec<Vec<f64>>,
    time_pre: Vec<Vec<f64>>,
    trunk_inputs: Vec<Vec<f64>>,
    trunk_pre: Vec<Vec<f64>>,
    head_input: Vec<f64>,
}

/// One adaptor evaluation: `(w, t) ↦ (v¹_t, v²_t)`.
pub fn forward(weights: &AdaptorWeights, w: &WPlusLatent, t: usize) -> Result<TokenEmbeddingPair> {
    forward_with_cache(weights, w, t).map(|(pair, _)| pair)
}

pub fn forward_with_cache(
    weights: &AdaptorWeights,
    w: &WPlusLatent,
    t: usize,
) -> Result<(TokenEmbeddingPair, ForwardCache)> {
    let cfg = &weights.config;
    if w.shape() != cfg.wplus_shape {
        return Err(Error::dim(
            "adaptor input",
            &cfg.wplus_shape.as_array(),
            &w.shape().as_array(),
        ));
    }
    if w.styles().iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("adaptor input is not finite"));
    }
    cfg.check_timestep(t)?;

    let rows = cfg.wplus_shape.layers;
    let dims = cfg.wplus_shape.dims;
    let heads = cfg.attn_heads;
    let head_dim = dims / heads;
    let inv_sqrt = 1.0 / libm::sqrt(head_dim as f64);
    let x = w.styles().to_vec();

    let project = |layer: &super::Linear| -> Vec<f64> {
        (0..rows)
            .flat_map(|r| layer.forward(&x[r * dims..(r + 1) * dims]))
            .collect()
    };
    let q = project(&weights.attn_q);
    let k = project(&weights.attn_k);
    let v = project(&weights.attn_v);

    let mut probs = vec![0.0; heads * rows * rows];
    let mut attended = vec![0.0; rows * dims];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..rows {
            let p = &mut probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            for j in 0..rows {
                let mut s = 0.0;
                for c in 0..head_dim {
                    s += q[i * dims + off + c] * k[j * dims + off + c];
                }
                p[j] = s * inv_sqrt;
            }
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = libm::exp(*pj - max);
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            for j in 0..rows {
                let pij = p[j];
                for c in 0..head_dim {
                    attended[i * dims + off + c] += pij * v[j * dims + off + c];
                }
            }
        }
    }

    // Residual attention block, flattened row-major.
    let mut features = Vec::with_capacity(rows * dims + cfg.time_width);
    for r in 0..rows {
        let out = weights.attn_out.forward(&attended[r * dims..(r + 1) * dims]);
        features.extend(out.iter().zip(&x[r * dims..(r + 1) * dims]).map(|(a, b)| a + b));
    }

    let mut e = positional_encode(t, cfg.pe_bands, cfg.max_timestep)?;
    let mut time_inputs = Vec::with_capacity(weights.time.len());
    let mut time_pre = Vec::with_capacity(weights.time.len());
    for (i, layer) in weights.time.iter().enumerate() {
        let pre = layer.forward(&e);
        time_inputs.push(core::mem::take(&mut e));
        e = if i + 1 < weights.time.len() {
            pre.iter().map(|&z| silu(z)).collect()
        } else {
            pre.clone()
        };
        time_pre.push(pre);
    }
    features.extend_from_slice(&e);

    let mut h = features;
    let mut trunk_inputs = Vec::with_capacity(weights.trunk.len());
    let mut trunk_pre = Vec::with_capacity(weights.trunk.len());
    for layer in &weights.trunk {
        let pre = layer.forward(&h);
        trunk_inputs.push(core::mem::take(&mut h));
        h = pre.iter().map(|&z| silu(z)).collect();
        trunk_pre.push(pre);
    }

    let v1 = weights.head1.forward(&h);
    let v2 = weights.head2.forward(&h);
    if v1.iter().chain(&v2).any(|x| !x.is_finite()) {
        return Err(Error::invalid("adaptor output is not finite"));
    }
    Ok((
        TokenEmbeddingPair { v1, v2, timestep: t },
        ForwardCache {
            x,
            q,
            k,
            v,
            probs,
            attended,
            time_inputs,
            time_pre,
            trunk_inputs,
            trunk_pre,
            head_input: h,
        },
    ))
}

/// Reverse pass from `dL/dv¹`, `dL/dv²`.
///
/// Parameter gradients are accumulated into `grads`; the gradient with
/// respect to the W+ input is returned (row-major `L × D`).
pub fn backward(
    weights: &AdaptorWeights,
    cache: &ForwardCache,
    d_v1: &[f64],
    d_v2: &[f64],
    grads: &mut AdaptorWeights,
) -> Vec<f64> {
    let cfg = &weights.config;
    let rows = cfg.wplus_shape.layers;
    let dims = cfg.wplus_shape.dims;
    let heads = cfg.attn_heads;
    let head_dim = dims / heads;
    let inv_sqrt = 1.0 / libm::sqrt(head_dim as f64);

    let mut dh = weights.head1.backward(&cache.head_input, d_v1, &mut grads.head1);
    let dh2 = weights.head2.backward(&cache.head_input, d_v2, &mut grads.head2);
    for (a, b) in dh.iter_mut().zip(dh2) {
        *a += b;
    }

    for idx in (0..weights.trunk.len()).rev() {
        let pre = &cache.trunk_pre[idx];
        let dpre: Vec<f64> = dh.iter().zip(pre).map(|(d, &z)| d * silu_grad(z)).collect();
        dh = weights.trunk[idx].backward(&cache.trunk_inputs[idx], &dpre, &mut grads.trunk[idx]);
    }

    let flat = rows * dims;
    let d_features = &dh[..flat];
    let mut de = dh[flat..].to_vec();
    for idx in (0..weights.time.len()).rev() {
        let dpre: Vec<f64> = if idx + 1 < weights.time.len() {
            de.iter()
                .zip(&cache.time_pre[idx])
                .map(|(d, &z)| d * silu_grad(z))
                .collect()
        } else {
            de.clone()
        };
        de = weights.time[idx].backward(&cache.time_inputs[idx], &dpre, &mut grads.time[idx]);
    }
    // The positional encoding has no parameters and t is discrete.

    let mut dx = d_features.to_vec();
    let mut d_attended = vec![0.0; flat];
    for r in 0..rows {
        let d_in = weights.attn_out.backward(
            &cache.attended[r * dims..(r + 1) * dims],
            &d_features[r * dims..(r + 1) * dims],
            &mut grads.attn_out,
        );
        d_attended[r * dims..(r + 1) * dims].copy_from_slice(&d_in);
    }

    let mut dq = vec![0.0; flat];
    let mut dk = vec![0.0; flat];
    let mut dv = vec![0.0; flat];
    let mut dp = vec![0.0; rows];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..rows {
            let p = &cache.probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            for j in 0..rows {
                let mut acc = 0.0;
                for c in 0..head_dim {
                    let g = d_attended[i * dims + off + c];
                    dv[j * dims + off + c] += p[j] * g;
                    acc += g * cache.v[j * dims + off + c];
                }
                dp[j] = acc;
            }
            let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..rows {
                let ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                for c in 0..head_dim {
                    dq[i * dims + off + c] += ds * cache.k[j * dims + off + c];
                    dk[j * dims + off + c] += ds * cache.q[i * dims + off + c];
                }
            }
        }
    }

    for r in 0..rows {
        let xr = &cache.x[r * dims..(r + 1) * dims];
        let span = r * dims..(r + 1) * dims;
        let a = weights.attn_q.backward(xr, &dq[span.clone()], &mut grads.attn_q);
        let b = weights.attn_k.backward(xr, &dk[span.clone()], &mut grads.attn_k);
        let c = weights.attn_v.backward(xr, &dv[span.clone()], &mut grads.attn_v);
        for (((d, a), b), c) in dx[span].iter_mut().zip(a).zip(b).zip(c) {
            *d += a + b + c;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::super::{embed_all_timesteps, AdaptorConfig};
    use super::*;
    use crate::latent::{SourceTag, WPlusShape};
    use crate::rng;
    use crate::Tensor;

    fn toy_weights() -> AdaptorWeights {
        let cfg = AdaptorConfig::toy();
        let v_cls: Vec<f64> = (0..cfg.token_dim).map(|i| 0.05 * i as f64 - 0.3).collect();
        let mut w = AdaptorWeights::init(&cfg, &v_cls, 11).unwrap();
        // Larger heads than the init gain so every path carries signal in
        // the gradient check.
        let mut rng = rng::stream(5, "test-heads");
        for head in [&mut w.head1, &mut w.head2] {
            let t = Tensor::randn([head.weight.len()], 0.3, &mut rng);
            head.weight.copy_from_slice(t.data());
        }
        w
    }

    fn toy_latent(seed: u64) -> WPlusLatent {
        let shape = WPlusShape::new(3, 8).unwrap();
        let mut rng = rng::stream(seed, "test-w");
        let t = Tensor::randn([24], 1.0, &mut rng);
        WPlusLatent::new(shape, t.into_data(), SourceTag::Synthetic).unwrap()
    }

    /// Scalar reduction used by the gradient checks.
    fn probe_loss(pair: &TokenEmbeddingPair) -> f64 {
        pair.v1
            .iter()
            .enumerate()
            .map(|(i, &x)| (i as f64 * 0.37 + 0.1) * x + 0.5 * x * x)
            .sum::<f64>()
            + pair.v2.iter().enumerate().map(|(i, &x)| (0.2 - 0.11 * i as f64) * x).sum::<f64>()
    }

    fn probe_grads(pair: &TokenEmbeddingPair) -> (Vec<f64>, Vec<f64>) {
        let d1 = pair.v1.iter().enumerate().map(|(i, &x)| i as f64 * 0.37 + 0.1 + x).collect();
        let d2 = (0..pair.v2.len()).map(|i| 0.2 - 0.11 * i as f64).collect();
        (d1, d2)
    }

    #[test]
    fn deterministic_outputs() {
        let weights = toy_weights();
        let w = toy_latent(1);
        let a = forward(&weights, &w, 4).unwrap();
        let b = forward(&weights, &w, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.v1.len(), 16);
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let weights = toy_weights();
        let w = toy_latent(2);
        let t = 3;
        let (pair, cache) = forward_with_cache(&weights, &w, t).unwrap();
        let (d1, d2) = probe_grads(&pair);
        let mut grads = weights.zeros_like();
        backward(&weights, &cache, &d1, &d2, &mut grads);

        let eps = 1e-4;
        let analytic = grads.params();
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let len = analytic[ti].len();
            let mut num = vec![0.0; len];
            for k in 0..len {
                let mut plus = weights.clone();
                plus.params_mut()[ti][k] += eps;
                let mut minus = weights.clone();
                minus.params_mut()[ti][k] -= eps;
                let lp = probe_loss(&forward(&plus, &w, t).unwrap());
                let lm = probe_loss(&forward(&minus, &w, t).unwrap());
                num[k] = (lp - lm) / (2.0 * eps);
            }
            let diff: f64 = analytic[ti].iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum();
            let scale = crate::linalg::norm(&num).max(crate::linalg::norm(analytic[ti]));
            assert!(scale > 0.0, "tensor {ti} has no gradient signal");
            let rel = libm::sqrt(diff) / scale;
            assert!(rel < 1e-3, "tensor {ti}: relative error {rel}");
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let weights = toy_weights();
        let w = toy_latent(3);
        let t = 7;
        let (pair, cache) = forward_with_cache(&weights, &w, t).unwrap();
        let (d1, d2) = probe_grads(&pair);
        let mut grads = weights.zeros_like();
        let dx = backward(&weights, &cache, &d1, &d2, &mut grads);
        let eps = 1e-5;
        for k in 0..w.styles().len() {
            let bump = |delta: f64| {
                let mut s = w.styles().to_vec();
                s[k] += delta;
                let wk = WPlusLatent::new(w.shape(), s, SourceTag::Synthetic).unwrap();
                probe_loss(&forward(&weights, &wk, t).unwrap())
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!(
                (num - dx[k]).abs() <= 1e-3 * num.abs().max(dx[k].abs()) + 1e-8,
                "entry {k}: {num} vs {}",
                dx[k]
            );
        }
    }

    #[test]
    fn schedule_matches_single_calls() {
        let weights = toy_weights();
        let w = toy_latent(4);
        let schedule = embed_all_timesteps(&weights, &w).unwrap();
        assert_eq!(schedule.len(), 10);
        for t in 1..=10 {
            assert_eq!(schedule.pair(t).unwrap(), &forward(&weights, &w, t).unwrap());
        }
    }

    #[test]
    fn outputs_vary_with_time_and_latent() {
        let weights = toy_weights();
        let w = toy_latent(5);
        let a = forward(&weights, &w, 1).unwrap();
        let b = forward(&weights, &w, 9).unwrap();
        assert_ne!(a.v1, b.v1);
        let other = toy_latent(6);
        assert_ne!(
            embed_all_timesteps(&weights, &w).unwrap(),
            embed_all_timesteps(&weights, &other).unwrap()
        );
    }

    #[test]
    fn large_inputs_stay_finite() {
        let weights = toy_weights();
        for value in [-1e3, 1e3] {
            let w = WPlusLatent::filled(WPlusShape::new(3, 8).unwrap(), value);
            for t in [1, 10] {
                let p = forward(&weights, &w, t).unwrap();
                assert!(p.v1.iter().chain(&p.v2).all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let weights = toy_weights();
        let w = toy_latent(1);
        assert!(forward(&weights, &w, 0).is_err());
        assert!(forward(&weights, &w, 11).is_err());
        let wrong = WPlusLatent::zeros(WPlusShape::new(2, 8).unwrap());
        assert!(matches!(forward(&weights, &wrong, 1), Err(Error::Dimension { .. })));
    }
}

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::AdaptorConfig;
use crate::linalg::{add_outer, matvec, matvec_t};
use crate::{rng, round_f32, Error, Result, Tensor};

/// Gain of the output heads at initialization. Small, so the initial
/// tokens sit close to the superclass embedding used as head bias.
const HEAD_INIT_GAIN: f64 = 0.01;

/// Dense layer `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    pub(crate) weight: Vec<f64>,
    pub(crate) bias: Option<Vec<f64>>,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: bias.then(|| vec![0.0; out_dim]),
        }
    }

    fn init(in_dim: usize, out_dim: usize, bias: bool, gain: f64, rng: &mut impl Rng) -> Self {
        let scale = gain / libm::sqrt(in_dim as f64);
        let mut layer = Self::zeros(in_dim, out_dim, bias);
        for w in &mut layer.weight {
            let z: f64 = rng.sample(StandardNormal);
            *w = z * scale;
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = matvec(&self.weight, self.out_dim, self.in_dim, x);
        if let Some(b) = &self.bias {
            for (yv, bv) in y.iter_mut().zip(b) {
                *yv += bv;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub(crate) fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        add_outer(&mut grad.weight, dy, x);
        if let Some(gb) = &mut grad.bias {
            for (g, d) in gb.iter_mut().zip(dy) {
                *g += d;
            }
        }
        matvec_t(&self.weight, self.out_dim, self.in_dim, dy)
    }
}

/// Parameters of the latent adaptor.
///
/// The same structure holds gradients during training (see
/// [`AdaptorWeights::zeros_like`]).
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorWeights {
    pub(crate) config: AdaptorConfig,
    pub(crate) attn_q: Linear,
    pub(crate) attn_k: Linear,
    pub(crate) attn_v: Linear,
    pub(crate) attn_out: Linear,
    pub(crate) time: Vec<Linear>,
    pub(crate) trunk: Vec<Linear>,
    pub(crate) head1: Linear,
    pub(crate) head2: Linear,
}

impl AdaptorWeights {
    fn layout(config: &AdaptorConfig, mut make: impl FnMut(usize, usize, bool, bool) -> Linear) -> Self {
        let d = config.wplus_shape.dims;
        let attn_q = make(d, d, false, false);
        let attn_k = make(d, d, false, false);
        let attn_v = make(d, d, false, false);
        let attn_out = make(d, d, true, false);
        let mut time = Vec::with_capacity(config.time_mlp_layers);
        let mut width = 2 * config.pe_bands;
        for _ in 0..config.time_mlp_layers {
            time.push(make(width, config.time_width, true, false));
            width = config.time_width;
        }
        let mut trunk = Vec::with_capacity(config.mlp_layers - 1);
        let mut width = config.wplus_shape.numel() + config.time_width;
        for _ in 1..config.mlp_layers {
            trunk.push(make(width, config.hidden_width, true, false));
            width = config.hidden_width;
        }
        let head1 = make(width, config.token_dim, true, true);
        let head2 = make(width, config.token_dim, true, true);
        Self {
            config: config.clone(),
            attn_q,
            attn_k,
            attn_v,
            attn_out,
            time,
            trunk,
            head1,
            head2,
        }
    }

    /// All-zero parameters with the layout of `config`.
    pub fn zeros(config: &AdaptorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::layout(config, |i, o, b, _| Linear::zeros(i, o, b)))
    }

    pub fn zeros_like(&self) -> Self {
        Self::layout(&self.config, |i, o, b, _| Linear::zeros(i, o, b))
    }

    /// Seeded initialization. Both output heads start at `v_cls` plus a
    /// small-gain projection of the trunk features.
    pub fn init(config: &AdaptorConfig, v_cls: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        if v_cls.len() != config.token_dim {
            return Err(Error::dim("superclass embedding", &[config.token_dim], &[v_cls.len()]));
        }
        let mut rng = rng::stream(seed, "adaptor-init");
        let mut weights = Self::layout(config, |i, o, b, head| {
            let gain = if head { HEAD_INIT_GAIN } else { 1.0 };
            Linear::init(i, o, b, gain, &mut rng)
        });
        weights.head1.bias = Some(v_cls.to_vec());
        weights.head2.bias = Some(v_cls.to_vec());
        Ok(weights)
    }

    pub fn config(&self) -> &AdaptorConfig {
        &self.config
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![
            (String::from("attn.q"), &self.attn_q),
            (String::from("attn.k"), &self.attn_k),
            (String::from("attn.v"), &self.attn_v),
            (String::from("attn.out"), &self.attn_out),
        ];
        for (i, l) in self.time.iter().enumerate() {
            out.push((format!("time.{i}"), l));
        }
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("mlp.{i}"), l));
        }
        out.push((String::from("head1"), &self.head1));
        out.push((String::from("head2"), &self.head2));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_out,
        ];
        out.extend(self.time.iter_mut());
        out.extend(self.trunk.iter_mut());
        out.push(&mut self.head1);
        out.push(&mut self.head2);
        out
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((
                format!("{name}.weight"),
                Tensor::new([layer.out_dim, layer.in_dim], layer.weight.clone())
                    .expect("layer weight matches its shape"),
            ));
            if let Some(b) = &layer.bias {
                out.push((
                    format!("{name}.bias"),
                    Tensor::new([layer.out_dim], b.clone()).expect("bias matches its shape"),
                ));
            }
        }
        out
    }

    /// Rebuilds weights from named tensors; every expected tensor must be
    /// present with its exact shape, and no extras are allowed.
    pub fn from_named_tensors(config: &AdaptorConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut weights = Self::zeros(config)?;
        let expected: Vec<String> = weights.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in tensors.keys() {
            if !expected.contains(name) {
                return Err(Error::invalid(format!("unexpected adaptor tensor '{name}'")));
            }
        }
        let names: Vec<String> = weights.layers().into_iter().map(|(n, _)| n).collect();
        for (name, layer) in names.iter().zip(weights.layers_mut()) {
            let w = tensors
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::invalid(format!("missing adaptor tensor '{name}.weight'")))?;
            w.ensure_shape(&[layer.out_dim, layer.in_dim], &format!("{name}.weight"))?;
            w.ensure_finite(&format!("{name}.weight"))?;
            layer.weight.copy_from_slice(w.data());
            if let Some(b) = &mut layer.bias {
                let t = tensors
                    .get(&format!("{name}.bias"))
                    .ok_or_else(|| Error::invalid(format!("missing adaptor tensor '{name}.bias'")))?;
                t.ensure_shape(&[b.len()], &format!("{name}.bias"))?;
                t.ensure_finite(&format!("{name}.bias"))?;
                b.copy_from_slice(t.data());
            }
        }
        Ok(weights)
    }

    /// Mutable views of every parameter buffer, in `named_tensors` order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(layer.weight.as_mut_slice());
            if let Some(b) = &mut layer.bias {
                out.push(b.as_mut_slice());
            }
        }
        out
    }

    /// Parameter buffers in `named_tensors` order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (_, layer) in self.layers() {
            out.push(layer.weight.as_slice());
            if let Some(b) = &layer.bias {
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            for x in p.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// `self += other`, for gradient accumulation.
    pub fn add_assign(&mut self, other: &AdaptorWeights) {
        let src = other.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            for x in p.iter_mut() {
                *x = round_f32(*x);
            }
        }
        out
    }
}

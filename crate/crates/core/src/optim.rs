//! Adam over a fixed list of parameter buffers.

use alloc::vec::Vec;

use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `sizes` lists the length of every parameter buffer, in update order.
    pub fn new(lr: f64, sizes: &[usize]) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid("learning rate must be finite and ≥ 0"));
        }
        Ok(Self {
            lr,
            step: 0,
            m: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. With `lr == 0` parameters are left
    /// bit-unchanged.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("optimizer buffers", &[self.m.len()], &[params.len()]));
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, self.step as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, self.step as f64);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != p.len() {
                return Err(Error::dim("optimizer buffer", &[self.m[k].len()], &[p.len()]));
            }
            if self.lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
            }
        }
        Ok(())
    }
}

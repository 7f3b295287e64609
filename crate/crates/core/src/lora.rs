//! Low-rank residual updates `W' = W + α·B·A` on denoiser projections.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::linalg::matmul;
use crate::{round_f32, Error, Result, Tensor};

/// One low-rank update for a named projection matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    target: String,
    rank: usize,
    in_dim: usize,
    out_dim: usize,
    /// `rank × in_dim`
    a: Vec<f64>,
    /// `out_dim × rank`
    b: Vec<f64>,
}

impl LoraDelta {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor) -> Result<Self> {
        let target = target.into();
        let [rank, in_dim] = two_d(&a, &format!("LoRA A of '{target}'"))?;
        let [out_dim, rank_b] = two_d(&b, &format!("LoRA B of '{target}'"))?;
        if rank_b != rank {
            return Err(Error::dim(format!("LoRA rank of '{target}'"), &[rank], &[rank_b]));
        }
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} for '{target}' must be in [1, {}]",
                in_dim.min(out_dim)
            )));
        }
        a.ensure_finite("LoRA A")?;
        b.ensure_finite("LoRA B")?;
        Ok(Self {
            target,
            rank,
            in_dim,
            out_dim,
            a: a.into_data(),
            b: b.into_data(),
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `(out_dim, in_dim)` of the adapted matrix.
    pub fn target_shape(&self) -> [usize; 2] {
        [self.out_dim, self.in_dim]
    }

    pub fn a(&self) -> Tensor {
        Tensor::new([self.rank, self.in_dim], self.a.clone()).expect("A matches its shape")
    }

    pub fn b(&self) -> Tensor {
        Tensor::new([self.out_dim, self.rank], self.b.clone()).expect("B matches its shape")
    }

    pub(crate) fn a_b_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.a, &mut self.b)
    }

    pub(crate) fn a_slice(&self) -> &[f64] {
        &self.a
    }

    pub(crate) fn b_slice(&self) -> &[f64] {
        &self.b
    }

    /// `ΔW = B·A`, shape `out_dim × in_dim`.
    pub fn delta_matrix(&self) -> Vec<f64> {
        matmul(&self.b, self.out_dim, self.rank, &self.a, self.in_dim)
    }

    pub fn is_zero(&self) -> bool {
        self.delta_matrix().iter().all(|&x| x == 0.0)
    }

    pub fn to_f32_precision(&self) -> Self {
        Self {
            a: self.a.iter().map(|&x| round_f32(x)).collect(),
            b: self.b.iter().map(|&x| round_f32(x)).collect(),
            ..self.clone()
        }
    }
}

fn two_d(t: &Tensor, context: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        ref other => Err(Error::dim(context, &[0, 0], other)),
    }
}

/// `W_base + α·B·A`.
pub fn lora_effective(w_base: &Tensor, delta: &LoraDelta, alpha: f64) -> Result<Tensor> {
    w_base.ensure_shape(&delta.target_shape(), &format!("LoRA target '{}'", delta.target))?;
    if !alpha.is_finite() {
        return Err(Error::invalid(format!("LoRA weight is {alpha}")));
    }
    let dw = delta.delta_matrix();
    let data = w_base
        .data()
        .iter()
        .zip(&dw)
        .map(|(&w, &d)| w + alpha * d)
        .collect();
    Tensor::new(w_base.shape().to_vec(), data)
}

/// The set of LoRA deltas active for one denoiser call, with their scale.
#[derive(Clone, Copy, Debug)]
pub struct Adaptation<'a> {
    deltas: &'a [LoraDelta],
    scale: f64,
}

impl<'a> Adaptation<'a> {
    pub const NONE: Adaptation<'static> = Adaptation {
        deltas: &[],
        scale: 0.0,
    };

    pub fn new(deltas: &'a [LoraDelta], scale: f64) -> Self {
        Self { deltas, scale }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn deltas(&self) -> &'a [LoraDelta] {
        self.deltas
    }

    pub fn find(&self, target: &str) -> Option<&'a LoraDelta> {
        self.deltas.iter().find(|d| d.target == target)
    }

    /// The effective weight for `target`; the base itself when no delta
    /// applies or the scale is zero.
    pub fn apply(&self, target: &str, base: &Tensor) -> Result<Tensor> {
        match self.find(target) {
            Some(delta) if self.scale != 0.0 => lora_effective(base, delta, self.scale),
            _ => Ok(base.clone()),
        }
    }

    /// Rejects deltas that do not name one of `targets` with matching shape.
    pub fn validate(&self, targets: &[(String, [usize; 2])]) -> Result<()> {
        for d in self.deltas {
            match targets.iter().find(|(n, _)| *n == d.target) {
                None => {
                    return Err(Error::Lookup {
                        kind: "LoRA target",
                        name: d.target.clone(),
                    })
                }
                Some((_, shape)) if *shape != d.target_shape() => {
                    return Err(Error::dim(
                        format!("LoRA target '{}'", d.target),
                        shape,
                        &d.target_shape(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn alpha_zero_is_base() {
        let base = Tensor::from_fn([3, 2], |i| i as f64 - 2.5);
        let d = LoraDelta::new(
            "t",
            Tensor::filled([1, 2], 0.7),
            Tensor::filled([3, 1], -1.3),
        )
        .unwrap();
        assert_eq!(lora_effective(&base, &d, 0.0).unwrap(), base);
    }

    #[test]
    fn rank_one_ones_is_all_ones_outer_product() {
        let base = Tensor::from_fn([3, 4], |i| i as f64);
        let d = LoraDelta::new("t", Tensor::filled([1, 4], 1.0), Tensor::filled([3, 1], 1.0)).unwrap();
        let out = lora_effective(&base, &d, 1.0).unwrap();
        for (o, b) in out.data().iter().zip(base.data()) {
            assert_eq!(*o, b + 1.0);
        }
    }

    #[test]
    fn shape_errors() {
        let d = LoraDelta::new("t", Tensor::zeros([1, 4]), Tensor::zeros([3, 1])).unwrap();
        assert!(matches!(
            lora_effective(&Tensor::zeros([4, 3]), &d, 1.0),
            Err(Error::Dimension { .. })
        ));
        assert!(LoraDelta::new("t", Tensor::zeros([2, 4]), Tensor::zeros([3, 1])).is_err());
        // rank above min(in, out)
        assert!(LoraDelta::new("t", Tensor::zeros([3, 2]), Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn adaptation_validates_targets() {
        let d = vec![LoraDelta::new("x", Tensor::zeros([1, 2]), Tensor::zeros([2, 1])).unwrap()];
        let a = Adaptation::new(&d, 1.0);
        assert!(a.validate(&[("x".into(), [2, 2])]).is_ok());
        assert!(a.validate(&[("y".into(), [2, 2])]).is_err());
        assert!(a.validate(&[("x".into(), [3, 2])]).is_err());
    }
}

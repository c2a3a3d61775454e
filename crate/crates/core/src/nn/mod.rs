//! Hand-differentiated network layers.
//!
//! Every layer exposes three entry points:
//! `forward` (inference, `&self`), `forward_train` (returns the output plus
//! whatever the backward pass needs) and `backward` (accumulates parameter
//! gradients and returns the input gradient). Weights are never mutated by a
//! forward pass, so inference on shared weights is thread-safe.

mod activation;
mod attention;
mod block;
mod channel_attention;
mod conv;
mod norm;

pub use activation::{gelu, gelu_grad};
pub use attention::{
    attend, attend_backward, correlation_map, sia, window_partition, AttentionOutput,
    CorrelationMap, SiaWeights, WindowAttention, WindowAttentionCache,
};
pub use block::{BlockCache, Mlp, MlpCache, TransformerBlock};
pub use channel_attention::{ChannelAttention, ChannelAttentionCache};
pub use conv::{Conv2d, Conv2dCache, ConvTranspose2x2, Linear};
pub use norm::{LayerNorm, LayerNormCache};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// A trainable tensor and its accumulated gradient, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Self {
            value: vec![v; len],
            grad: vec![0.0; len],
        }
    }

    /// Truncated normal at two standard deviations.
    pub fn trunc_normal(len: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = (0..len)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Self {
            value,
            grad: vec![0.0; len],
        }
    }

    /// `U(-1/√fan_in, 1/√fan_in)`, the usual default for convolutions.
    pub fn fan_in_uniform(len: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            value,
            grad: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Standard deviation for projection weights.
pub const INIT_STD: f64 = 0.02;

/// Anything holding [`Param`]s. Visiting order is fixed and defines the
/// checkpoint layout.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    /// All parameter values concatenated in visiting order.
    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    /// Overwrites all values; `values.len()` must equal [`Self::num_params`].
    fn set_flat_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "parameter count mismatch");
        let mut offset = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for item in self {
            item.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for item in self {
            item.visit_params_mut(f);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(item) = self {
            item.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(item) = self {
            item.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference oracle shared by the layer tests.

    use super::Parameterized;
    use crate::tensor::Tensor3;

    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
    pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Indices spread evenly over `0..len`, at most `max` of them.
    pub fn sample_indices(len: usize, max: usize) -> Vec<usize> {
        if len <= max {
            (0..len).collect()
        } else {
            (0..max).map(|i| i * len / max + (i * 7) % (len / max).max(1)).collect()
        }
    }

    /// Central differences of `loss` w.r.t. selected input elements.
    pub fn numeric_input_grad(
        x: &Tensor3,
        idx: &[usize],
        h: f64,
        mut loss: impl FnMut(&Tensor3) -> f64,
    ) -> Vec<f64> {
        let mut xp = x.clone();
        idx.iter()
            .map(|&i| {
                let orig = xp.data[i];
                xp.data[i] = orig + h;
                let up = loss(&xp);
                xp.data[i] = orig - h;
                let down = loss(&xp);
                xp.data[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Central differences of `loss` w.r.t. selected flat parameters.
    pub fn numeric_param_grad<M: Parameterized>(
        module: &mut M,
        idx: &[usize],
        h: f64,
        mut loss: impl FnMut(&M) -> f64,
    ) -> Vec<f64> {
        let base = module.flat_values();
        let mut work = base.clone();
        let out = idx
            .iter()
            .map(|&i| {
                work[i] = base[i] + h;
                module.set_flat_values(&work);
                let up = loss(module);
                work[i] = base[i] - h;
                module.set_flat_values(&work);
                let down = loss(module);
                work[i] = base[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        module.set_flat_values(&base);
        out
    }

    /// Fixed pseudo-random weights for a scalar probe loss `Σ w ⊙ y`.
    pub fn probe(len: usize, salt: u64) -> Vec<f64> {
        (0..len)
            .map(|i| {
                let v = ((i as u64 + 1).wrapping_mul(0x9e37_79b9) ^ salt) % 1000;
                v as f64 / 500.0 - 1.0
            })
            .collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

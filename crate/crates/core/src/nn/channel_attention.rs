use super::{Param, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor3;

/// Squeeze-and-excitation gating: global average pool, a
/// `C → C/r → C` bottleneck with ReLU, then a sigmoid gate per channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    /// `hidden × channels`
    pub w1: Param,
    pub b1: Param,
    /// `channels × hidden`
    pub w2: Param,
    pub b2: Param,
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionCache {
    input: Tensor3,
    squeezed: Vec<f64>,
    hidden_pre: Vec<f64>,
    gate: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ChannelAttention {
    pub fn new(channels: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            channels,
            hidden,
            w1: Param::fan_in_uniform(hidden * channels, channels, rng),
            b1: Param::fan_in_uniform(hidden, channels, rng),
            w2: Param::fan_in_uniform(channels * hidden, hidden, rng),
            b2: Param::fan_in_uniform(channels, hidden, rng),
        }
    }

    fn gates(&self, x: &Tensor3) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = x.plane_len() as f64;
        let squeezed: Vec<f64> = (0..self.channels)
            .map(|c| x.plane(c).iter().sum::<f64>() / n)
            .collect();
        let hidden_pre: Vec<f64> = (0..self.hidden)
            .map(|j| {
                self.b1.value[j]
                    + (0..self.channels)
                        .map(|c| self.w1.value[j * self.channels + c] * squeezed[c])
                        .sum::<f64>()
            })
            .collect();
        let gate = (0..self.channels)
            .map(|c| {
                let z = self.b2.value[c]
                    + (0..self.hidden)
                        .map(|j| self.w2.value[c * self.hidden + j] * hidden_pre[j].max(0.0))
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect();
        (squeezed, hidden_pre, gate)
    }

    fn scale(x: &Tensor3, gate: &[f64]) -> Tensor3 {
        let mut y = x.clone();
        for (c, g) in gate.iter().enumerate() {
            y.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        y
    }

    /// Per-channel gate values for `x`.
    pub fn gate(&self, x: &Tensor3) -> Vec<f64> {
        self.gates(x).2
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        Self::scale(x, &self.gates(x).2)
    }

    pub fn forward_train(&self, x: &Tensor3) -> (Tensor3, ChannelAttentionCache) {
        let (squeezed, hidden_pre, gate) = self.gates(x);
        let y = Self::scale(x, &gate);
        (
            y,
            ChannelAttentionCache {
                input: x.clone(),
                squeezed,
                hidden_pre,
                gate,
            },
        )
    }

    pub fn backward(&mut self, cache: &ChannelAttentionCache, dy: &Tensor3) -> Tensor3 {
        let x = &cache.input;
        let (c_n, h_n) = (self.channels, self.hidden);
        let n = x.plane_len() as f64;
        let dgate: Vec<f64> = (0..c_n)
            .map(|c| dy.plane(c).iter().zip(x.plane(c)).map(|(a, b)| a * b).sum())
            .collect();
        let dz: Vec<f64> = (0..c_n)
            .map(|c| dgate[c] * cache.gate[c] * (1.0 - cache.gate[c]))
            .collect();
        let relu: Vec<f64> = cache.hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let mut dhidden = vec![0.0; h_n];
        for c in 0..c_n {
            self.b2.grad[c] += dz[c];
            for j in 0..h_n {
                self.w2.grad[c * h_n + j] += dz[c] * relu[j];
                dhidden[j] += self.w2.value[c * h_n + j] * dz[c];
            }
        }
        let mut dsqueezed = vec![0.0; c_n];
        for j in 0..h_n {
            let d = if cache.hidden_pre[j] > 0.0 { dhidden[j] } else { 0.0 };
            self.b1.grad[j] += d;
            for c in 0..c_n {
                self.w1.grad[j * c_n + c] += d * cache.squeezed[c];
                dsqueezed[c] += self.w1.value[j * c_n + c] * d;
            }
        }
        let mut dx = dy.clone();
        for c in 0..c_n {
            let g = cache.gate[c];
            let add = dsqueezed[c] / n;
            dx.plane_mut(c).iter_mut().for_each(|v| *v = *v * g + add);
        }
        dx
    }
}

impl Parameterized for ChannelAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

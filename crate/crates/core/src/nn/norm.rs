use super::{Param, Parameterized};
use crate::tensor::Tensor3;

const LN_EPS: f64 = 1e-5;

/// Layer normalization across channels, independently at every pixel.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor3,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
        }
    }

    fn normalize(&self, x: &Tensor3) -> (Tensor3, Vec<f64>) {
        let (c, h, w) = x.shape();
        let n = h * w;
        let mut mean = vec![0.0; n];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(x.plane(ch)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; n];
        for ch in 0..c {
            for ((s, v), m) in var.iter_mut().zip(x.plane(ch)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / c as f64 + LN_EPS).sqrt())
            .collect();
        let mut xhat = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            let src = x.plane(ch);
            let dst = xhat.plane_mut(ch);
            for i in 0..n {
                dst[i] = (src[i] - mean[i]) * inv_std[i];
            }
        }
        (xhat, inv_std)
    }

    fn affine(&self, xhat: &Tensor3) -> Tensor3 {
        let mut y = xhat.clone();
        for ch in 0..self.channels {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for v in y.plane_mut(ch) {
                *v = *v * g + b;
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        let (xhat, _) = self.normalize(x);
        self.affine(&xhat)
    }

    pub fn forward_train(&self, x: &Tensor3) -> (Tensor3, LayerNormCache) {
        let (xhat, inv_std) = self.normalize(x);
        let y = self.affine(&xhat);
        (
            y,
            LayerNormCache {
                normalized: xhat,
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor3) -> Tensor3 {
        let xhat = &cache.normalized;
        let (c, h, w) = xhat.shape();
        let n = h * w;
        // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut sum_d = vec![0.0; n];
        let mut sum_dx = vec![0.0; n];
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let dyp = dy.plane(ch);
            let xp = xhat.plane(ch);
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..n {
                let d = dyp[i] * g;
                sum_d[i] += d;
                sum_dx[i] += d * xp[i];
                dg += dyp[i] * xp[i];
                db += dyp[i];
            }
            self.gamma.grad[ch] += dg;
            self.beta.grad[ch] += db;
        }
        let inv_c = 1.0 / c as f64;
        let mut dx = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let dyp = dy.plane(ch);
            let xp = xhat.plane(ch);
            let out = dx.plane_mut(ch);
            for i in 0..n {
                out[i] = cache.inv_std[i]
                    * (dyp[i] * g - sum_d[i] * inv_c - xp[i] * sum_dx[i] * inv_c);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

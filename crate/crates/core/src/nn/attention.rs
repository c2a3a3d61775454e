//! Window self-attention with shadow-interaction reweighting.
//!
//! Inside each window the softmax attention map `A` is multiplied
//! elementwise by `σΣ + (1 − σ)·1`, where `Σ[i][j] = M[i] XOR M[j]` marks
//! token pairs that straddle the shadow boundary. Cross-region pairs keep
//! their weight, same-region pairs are damped by `1 − σ`. Rows are not
//! renormalized, so `σ = 0` is exactly vanilla attention.

use num_traits::Float;

use super::{Linear, Param, Parameterized};
use crate::error::{shape_err, Result};
use crate::imaging::ShadowMask;
use crate::rng::Rng;
use crate::tensor::Tensor3;

/// Symmetric binary matrix of shadow/non-shadow token pairs in one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationMap {
    n: usize,
    data: Vec<bool>,
}

/// `Σ[i][j] = m[i] XOR m[j]`.
pub fn correlation_map(m: &[bool]) -> CorrelationMap {
    let n = m.len();
    let mut data = Vec::with_capacity(n * n);
    for &mi in m {
        for &mj in m {
            data.push(mi ^ mj);
        }
    }
    CorrelationMap { n, data }
}

impl CorrelationMap {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err!("correlation map must be square"));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| !self.get(i, i))
    }

    /// Row-major `σΣ + (1 − σ)·1`.
    pub fn reweight<T: Float>(&self, sigma: T) -> Vec<T> {
        let same = T::one() - sigma;
        let cross = sigma + same;
        self.data
            .iter()
            .map(|&s| if s { cross } else { same })
            .collect()
    }
}

/// Result of [`attend`]: the `n × d` output and the `n × n` softmax map
/// before reweighting.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub out: Vec<T>,
    pub probs: Vec<T>,
}

/// Single-head attention `(softmax(QKᵀ/√d) ⊙ W) V` over row-major
/// `n × d` matrices. `reweight = None` means `W = 1`.
pub fn attend<T: Float>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, reweight: Option<&[T]>) -> AttentionOutput<T> {
    let scale = T::one() / T::from(d).expect("head dim fits in float").sqrt();
    let mut probs = vec![T::zero(); n * n];
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut probs[i * n..(i + 1) * n];
        let mut max = T::neg_infinity();
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for t in 0..d {
                acc = acc + qi[t] * kj[t];
            }
            *s = acc * scale;
            max = max.max(*s);
        }
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum = sum + *s;
        }
        for s in row.iter_mut() {
            *s = *s / sum;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let a = match reweight {
                Some(w) => row[j] * w[i * n + j],
                None => row[j],
            };
            let vj = &v[j * d..(j + 1) * d];
            for t in 0..d {
                oi[t] = oi[t] + a * vj[t];
            }
        }
    }
    AttentionOutput { out, probs }
}

/// Gradients of [`attend`] w.r.t. `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    reweight: Option<&[f64]>,
    dout: &[f64],
    n: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut drow = vec![0.0; n];
    for i in 0..n {
        let doi = &dout[i * d..(i + 1) * d];
        let prow = &probs[i * n..(i + 1) * n];
        // dA'[i][j] = dout_i · v_j ; dV_j += A'[i][j] dout_i ; dA = dA' ⊙ W
        for j in 0..n {
            let w = reweight.map_or(1.0, |w| w[i * n + j]);
            let vj = &v[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for t in 0..d {
                acc += doi[t] * vj[t];
            }
            drow[j] = acc * w;
            let a = prow[j] * w;
            let dvj = &mut dv[j * d..(j + 1) * d];
            for t in 0..d {
                dvj[t] += a * doi[t];
            }
        }
        // softmax backward: dS = A ⊙ (dA − Σ_j dA A)
        let inner: f64 = drow.iter().zip(prow).map(|(g, p)| g * p).sum();
        let qi = &q[i * d..(i + 1) * d];
        let dqi = &mut dq[i * d..(i + 1) * d];
        for j in 0..n {
            let ds = prow[j] * (drow[j] - inner) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = &k[j * d..(j + 1) * d];
            for t in 0..d {
                dqi[t] += ds * kj[t];
            }
            let dkj = &mut dk[j * d..(j + 1) * d];
            for t in 0..d {
                dkj[t] += ds * qi[t];
            }
        }
    }
    (dq, dk, dv)
}

/// Projection weights for the token-level [`sia`] operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SiaWeights<T> {
    pub channels: usize,
    /// `3C × C`, rows ordered Q, K, V.
    pub qkv_weight: Vec<T>,
    pub qkv_bias: Vec<T>,
    /// `C × C`
    pub proj_weight: Vec<T>,
    pub proj_bias: Vec<T>,
}

impl<T: Float> SiaWeights<T> {
    /// Q = K = V = identity, identity output projection, zero biases.
    pub fn identity(channels: usize) -> Self {
        let mut qkv_weight = vec![T::zero(); 3 * channels * channels];
        for part in 0..3 {
            for c in 0..channels {
                qkv_weight[(part * channels + c) * channels + c] = T::one();
            }
        }
        let mut proj_weight = vec![T::zero(); channels * channels];
        for c in 0..channels {
            proj_weight[c * channels + c] = T::one();
        }
        Self {
            channels,
            qkv_weight,
            qkv_bias: vec![T::zero(); 3 * channels],
            proj_weight,
            proj_bias: vec![T::zero(); channels],
        }
    }
}

fn project<T: Float>(x: &[T], n: usize, cin: usize, w: &[T], b: &[T], cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout];
    for t in 0..n {
        let xt = &x[t * cin..(t + 1) * cin];
        for o in 0..cout {
            let wo = &w[o * cin..(o + 1) * cin];
            let mut acc = b[o];
            for c in 0..cin {
                acc = acc + wo[c] * xt[c];
            }
            out[t * cout + o] = acc;
        }
    }
    out
}

/// Shadow-interaction attention on one window of `n` tokens
/// (`x` is row-major `n × C`).
pub fn sia<T: Float>(
    x: &[T],
    n: usize,
    weights: &SiaWeights<T>,
    corr: &CorrelationMap,
    sigma: T,
    heads: usize,
) -> Result<Vec<T>> {
    let c = weights.channels;
    if x.len() != n * c {
        return Err(shape_err!("token matrix has {} values, expected {n}x{c}", x.len()));
    }
    if corr.size() != n || corr.data.len() != n * n {
        return Err(shape_err!("correlation map is {}x{}, window has {n} tokens", corr.size(), corr.size()));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(shape_err!("{c} channels cannot be split into {heads} heads"));
    }
    let dh = c / heads;
    let qkv = project(x, n, c, &weights.qkv_weight, &weights.qkv_bias, 3 * c);
    let reweight = corr.reweight(sigma);
    let mut merged = vec![T::zero(); n * c];
    let gather = |part: usize, h: usize| -> Vec<T> {
        let mut m = Vec::with_capacity(n * dh);
        for t in 0..n {
            let base = t * 3 * c + part * c + h * dh;
            m.extend_from_slice(&qkv[base..base + dh]);
        }
        m
    };
    for h in 0..heads {
        let res = attend(&gather(0, h), &gather(1, h), &gather(2, h), n, dh, Some(&reweight));
        for t in 0..n {
            merged[t * c + h * dh..t * c + (h + 1) * dh].copy_from_slice(&res.out[t * dh..(t + 1) * dh]);
        }
    }
    Ok(project(&merged, n, c, &weights.proj_weight, &weights.proj_bias, c))
}

/// Flat pixel indices of every non-overlapping `p × p` window of an
/// `h × w` grid, windows in row-major order, tokens row-major inside each.
pub fn window_partition(h: usize, w: usize, p: usize) -> Result<Vec<Vec<usize>>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(shape_err!("{h}x{w} is not divisible into {p}x{p} windows"));
    }
    let mut windows = Vec::with_capacity((h / p) * (w / p));
    for wy in 0..h / p {
        for wx in 0..w / p {
            let mut tokens = Vec::with_capacity(p * p);
            for y in 0..p {
                for x in 0..p {
                    tokens.push((wy * p + y) * w + wx * p + x);
                }
            }
            windows.push(tokens);
        }
    }
    Ok(windows)
}

/// Multi-head window attention over a feature map; with a mask it applies
/// the shadow-interaction reweighting, without one it is plain window
/// self-attention.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub sigma: f64,
    pub qkv: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct WindowAttentionCache {
    input: Tensor3,
    qkv: Tensor3,
    merged: Tensor3,
    windows: Vec<Vec<usize>>,
    /// Per window, `None` when unmasked.
    reweights: Vec<Option<Vec<f64>>>,
    /// Indexed `[window * heads + head]`.
    probs: Vec<Vec<f64>>,
}

impl WindowAttentionCache {
    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    /// `A ⊙ W` for one window, averaged over heads.
    pub fn reweighted_attention(&self, window: usize) -> Vec<f64> {
        let heads = self.probs.len() / self.windows.len();
        let n = self.windows[window].len();
        let mut acc = vec![0.0; n * n];
        for h in 0..heads {
            let p = &self.probs[window * heads + h];
            for (i, a) in acc.iter_mut().enumerate() {
                let w = self.reweights[window].as_ref().map_or(1.0, |r| r[i]);
                *a += p[i] * w / heads as f64;
            }
        }
        acc
    }
}

impl WindowAttention {
    pub fn new(channels: usize, heads: usize, window: usize, sigma: f64, rng: &mut Rng) -> Self {
        Self {
            channels,
            heads,
            window,
            sigma,
            qkv: Linear::new(channels, 3 * channels, rng),
            proj: Linear::new(channels, channels, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn gather(qkv: &Tensor3, tokens: &[usize], channel0: usize, dh: usize) -> Vec<f64> {
        let hw = qkv.plane_len();
        let mut m = vec![0.0; tokens.len() * dh];
        for j in 0..dh {
            let plane = &qkv.data[(channel0 + j) * hw..(channel0 + j + 1) * hw];
            for (t, &pos) in tokens.iter().enumerate() {
                m[t * dh + j] = plane[pos];
            }
        }
        m
    }

    fn scatter_add(dst: &mut Tensor3, tokens: &[usize], channel0: usize, dh: usize, src: &[f64]) {
        let hw = dst.plane_len();
        for j in 0..dh {
            let plane = &mut dst.data[(channel0 + j) * hw..(channel0 + j + 1) * hw];
            for (t, &pos) in tokens.iter().enumerate() {
                plane[pos] += src[t * dh + j];
            }
        }
    }

    fn run(&self, x: &Tensor3, mask: Option<&ShadowMask>) -> Result<(Tensor3, WindowAttentionCache)> {
        let (c, h, w) = x.shape();
        if c != self.channels {
            return Err(shape_err!("attention expects {} channels, got {c}", self.channels));
        }
        if let Some(m) = mask {
            if (m.height(), m.width()) != (h, w) {
                return Err(shape_err!(
                    "pooled mask {}x{} does not match features {h}x{w}",
                    m.height(),
                    m.width()
                ));
            }
        }
        let windows = window_partition(h, w, self.window)?;
        let qkv = self.qkv.forward(x);
        let dh = self.head_dim();
        let mut merged = Tensor3::zeros(c, h, w);
        let mut reweights = Vec::with_capacity(windows.len());
        let mut probs = Vec::with_capacity(windows.len() * self.heads);
        for tokens in &windows {
            let n = tokens.len();
            let rw = mask.map(|m| {
                let bits: Vec<bool> = tokens.iter().map(|&p| m.data()[p]).collect();
                correlation_map(&bits).reweight(self.sigma)
            });
            for head in 0..self.heads {
                let q = Self::gather(&qkv, tokens, head * dh, dh);
                let k = Self::gather(&qkv, tokens, c + head * dh, dh);
                let v = Self::gather(&qkv, tokens, 2 * c + head * dh, dh);
                let res = attend(&q, &k, &v, n, dh, rw.as_deref());
                Self::scatter_add(&mut merged, tokens, head * dh, dh, &res.out);
                probs.push(res.probs);
            }
            reweights.push(rw);
        }
        let out = self.proj.forward(&merged);
        Ok((
            out,
            WindowAttentionCache {
                input: x.clone(),
                qkv,
                merged,
                windows,
                reweights,
                probs,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor3, mask: Option<&ShadowMask>) -> Result<Tensor3> {
        Ok(self.run(x, mask)?.0)
    }

    pub fn forward_train(&self, x: &Tensor3, mask: Option<&ShadowMask>) -> Result<(Tensor3, WindowAttentionCache)> {
        self.run(x, mask)
    }

    pub fn backward(&mut self, cache: &WindowAttentionCache, dy: &Tensor3) -> Tensor3 {
        let c = self.channels;
        let dh = self.head_dim();
        let dmerged = self.proj.backward(&cache.merged, dy);
        let mut dqkv = Tensor3::zeros(3 * c, dy.height, dy.width);
        for (wi, tokens) in cache.windows.iter().enumerate() {
            let n = tokens.len();
            let rw = cache.reweights[wi].as_deref();
            for head in 0..self.heads {
                let q = Self::gather(&cache.qkv, tokens, head * dh, dh);
                let k = Self::gather(&cache.qkv, tokens, c + head * dh, dh);
                let v = Self::gather(&cache.qkv, tokens, 2 * c + head * dh, dh);
                let dout = Self::gather(&dmerged, tokens, head * dh, dh);
                let probs = &cache.probs[wi * self.heads + head];
                let (dq, dk, dv) = attend_backward(&q, &k, &v, probs, rw, &dout, n, dh);
                Self::scatter_add(&mut dqkv, tokens, head * dh, dh, &dq);
                Self::scatter_add(&mut dqkv, tokens, c + head * dh, dh, &dk);
                Self::scatter_add(&mut dqkv, tokens, 2 * c + head * dh, dh, &dv);
            }
        }
        self.qkv.backward(&cache.input, &dqkv)
    }
}

impl Parameterized for WindowAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.qkv.visit_params(f);
        self.proj.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.qkv.visit_params_mut(f);
        self.proj.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn xor_table_examples() {
        let s = correlation_map(&[true, false]);
        assert_eq!(s.data(), &[false, true, true, false]);
        assert!(correlation_map(&[true; 5]).data().iter().all(|&v| !v));
        let s = correlation_map(&[true, true, false]);
        let expected = [[false, false, true], [false, false, true], [true, true, false]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), expected[i][j]);
            }
        }
    }

    #[test]
    fn non_square_map_is_rejected() {
        assert!(CorrelationMap::from_rows(&[vec![false, true], vec![true]]).is_err());
        let x = vec![0.0f64; 6];
        let bad = correlation_map(&[true, false]);
        let w = SiaWeights::identity(2);
        assert!(sia(&x, 3, &w, &bad, 0.2, 1).is_err());
    }

    /// Two tokens, identity projections, x = I, m = [1, 0], σ = 0.2.
    /// With d = √2: A = softmax([[1,0],[0,1]]/√2) row-wise, so
    /// a = e^{1/√2} / (e^{1/√2} + 1) on the diagonal, 1 − a off it.
    /// Σ = [[0,1],[1,0]] so W = [[0.8,1],[1,0.8]]; A'V = A' because V = I.
    #[test]
    fn two_token_hand_computed_example() {
        let x = vec![1.0f64, 0.0, 0.0, 1.0];
        let corr = correlation_map(&[true, false]);
        let out = sia(&x, 2, &SiaWeights::identity(2), &corr, 0.2, 1).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let a = e / (e + 1.0);
        let expected = [0.8 * a, 1.0 - a, 1.0 - a, 0.8 * a];
        for (o, x) in out.iter().zip(expected) {
            assert!((o - x).abs() < 1e-15, "{o} vs {x}");
        }
    }

    #[test]
    fn single_region_window_scales_by_one_minus_sigma() {
        let n = 6;
        let c = 4;
        let x: Vec<f64> = probe(n * c, 3);
        let corr = correlation_map(&[false; 6]);
        let w = SiaWeights::identity(c);
        let plain = sia(&x, n, &w, &corr, 0.0, 2).unwrap();
        let damped = sia(&x, n, &w, &corr, 0.3, 2).unwrap();
        for (p, d) in plain.iter().zip(&damped) {
            assert!((0.7 * p - d).abs() < 1e-14);
        }
    }

    #[test]
    fn attend_backward_matches_finite_differences() {
        let (n, d) = (5, 3);
        let q = probe(n * d, 1);
        let k = probe(n * d, 2);
        let v = probe(n * d, 3);
        let rw = correlation_map(&[true, false, false, true, false]).reweight(0.2);
        let wout = probe(n * d, 4);
        let loss = |q: &[f64], k: &[f64], v: &[f64]| dot(&attend(q, k, v, n, d, Some(&rw)).out, &wout);
        let res = attend(&q, &k, &v, n, d, Some(&rw));
        let (dq, dk, dv) = attend_backward(&q, &k, &v, &res.probs, Some(&rw), &wout, n, d);
        let h = 1e-6;
        let numeric = |which: usize| -> Vec<f64> {
            (0..n * d)
                .map(|i| {
                    let mut args = [q.clone(), k.clone(), v.clone()];
                    args[which][i] += h;
                    let up = loss(&args[0], &args[1], &args[2]);
                    args[which][i] -= 2.0 * h;
                    let down = loss(&args[0], &args[1], &args[2]);
                    (up - down) / (2.0 * h)
                })
                .collect()
        };
        assert!(rel_error(&dq, &numeric(0)) < 1e-7);
        assert!(rel_error(&dk, &numeric(1)) < 1e-7);
        assert!(rel_error(&dv, &numeric(2)) < 1e-7);
    }

    #[test]
    fn partition_covers_every_pixel_once() {
        let windows = window_partition(8, 12, 4).unwrap();
        assert_eq!(windows.len(), 6);
        let mut seen = vec![0; 96];
        for w in &windows {
            assert_eq!(w.len(), 16);
            for &p in w {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!(window_partition(8, 10, 4).is_err());
    }

    fn layer(c: usize, heads: usize, p: usize, sigma: f64, seed: u64) -> WindowAttention {
        let mut a = WindowAttention::new(c, heads, p, sigma, &mut rng_from_seed(seed));
        let v: Vec<f64> = probe(a.num_params(), seed).iter().map(|x| x * 0.4).collect();
        a.set_flat_values(&v);
        a
    }

    #[test]
    fn layer_matches_token_level_operator() {
        let (c, heads, p) = (4, 2, 2);
        let att = layer(c, heads, p, 0.2, 7);
        let x = Tensor3::from_vec(c, 4, 4, probe(64, 5)).unwrap();
        let mask = ShadowMask::from_fn(4, 4, |y, xx| y + xx < 3);
        let y = att.forward(&x, Some(&mask)).unwrap();
        let weights = SiaWeights {
            channels: c,
            qkv_weight: att.qkv.weight.value.clone(),
            qkv_bias: att.qkv.bias.value.clone(),
            proj_weight: att.proj.weight.value.clone(),
            proj_bias: att.proj.bias.value.clone(),
        };
        for tokens in window_partition(4, 4, p).unwrap() {
            let n = tokens.len();
            let mut xt = vec![0.0; n * c];
            for (t, &pos) in tokens.iter().enumerate() {
                for ch in 0..c {
                    xt[t * c + ch] = x.data[ch * 16 + pos];
                }
            }
            let bits: Vec<bool> = tokens.iter().map(|&pp| mask.data()[pp]).collect();
            let out = sia(&xt, n, &weights, &correlation_map(&bits), 0.2, heads).unwrap();
            for (t, &pos) in tokens.iter().enumerate() {
                for ch in 0..c {
                    assert!((out[t * c + ch] - y.data[ch * 16 + pos]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let (c, heads, p) = (4, 2, 2);
        let mut att = layer(c, heads, p, 0.2, 9);
        let x = Tensor3::from_vec(c, 4, 4, probe(64, 6)).unwrap();
        let mask = ShadowMask::from_fn(4, 4, |y, xx| (y * 4 + xx) % 3 == 0);
        let (y, cache) = att.forward_train(&x, Some(&mask)).unwrap();
        let w = probe(y.data.len(), 12);
        att.zero_grad();
        let dx = att.backward(&cache, &Tensor3::from_vec(c, 4, 4, w.clone()).unwrap());
        let idx: Vec<usize> = (0..64).collect();
        let num = numeric_input_grad(&x, &idx, 1e-5, |xx| {
            dot(&att.forward(xx, Some(&mask)).unwrap().data, &w)
        });
        assert!(rel_error(&dx.data, &num) < 1e-7);
        let analytic = att.flat_grads();
        let pidx: Vec<usize> = (0..analytic.len()).collect();
        let num = numeric_param_grad(&mut att, &pidx, 1e-5, |m| {
            dot(&m.forward(&x, Some(&mask)).unwrap().data, &w)
        });
        assert!(rel_error(&analytic, &num) < 1e-7);
    }

    #[test]
    fn zero_sigma_matches_unmasked_attention() {
        let att = layer(4, 1, 2, 0.0, 3);
        let x = Tensor3::from_vec(4, 4, 4, probe(64, 1)).unwrap();
        let mask = ShadowMask::from_fn(4, 4, |y, _| y < 2);
        let a = att.forward(&x, Some(&mask)).unwrap();
        let b = att.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }
}

use super::{
    gelu, gelu_grad, ChannelAttention, ChannelAttentionCache, LayerNorm, LayerNormCache, Linear, Param,
    Parameterized, WindowAttention, WindowAttentionCache,
};
use crate::error::Result;
use crate::imaging::ShadowMask;
use crate::rng::Rng;
use crate::tensor::{MatRef, Tensor3};

/// Positions per chunk during inference, bounding the hidden buffer.
const MLP_CHUNK: usize = 4096;

/// Position-wise feed-forward: expand, GELU, project back.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Tensor3,
    hidden_pre: Vec<f64>,
}

impl Mlp {
    pub fn new(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        let n = x.plane_len();
        let c = x.channels;
        let hidden = self.hidden();
        let mut out = Tensor3::zeros(c, x.height, x.width);
        let mut buf = vec![0.0; hidden * MLP_CHUNK.min(n)];
        let mut start = 0;
        while start < n {
            let len = MLP_CHUNK.min(n - start);
            let xin = MatRef {
                data: &x.data[start..],
                rows: c,
                cols: len,
                row_stride: n,
                col_stride: 1,
            };
            self.fc1.apply_into(xin, &mut buf, len);
            let act = &mut buf[..hidden * len];
            act.iter_mut().for_each(|v| *v = gelu(*v));
            self.fc2
                .apply_into(MatRef::new(act, hidden, len), &mut out.data[start..], n);
            start += len;
        }
        out
    }

    pub fn forward_train(&self, x: &Tensor3) -> (Tensor3, MlpCache) {
        let n = x.plane_len();
        let hidden_pre = self.fc1.apply(&x.data, n);
        let act: Vec<f64> = hidden_pre.iter().map(|&v| gelu(v)).collect();
        let y = Tensor3 {
            channels: x.channels,
            height: x.height,
            width: x.width,
            data: self.fc2.apply(&act, n),
        };
        (
            y,
            MlpCache {
                input: x.clone(),
                hidden_pre,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor3) -> Tensor3 {
        let n = dy.plane_len();
        let act: Vec<f64> = cache.hidden_pre.iter().map(|&v| gelu(v)).collect();
        let mut dh = self.fc2.backward_raw(&act, &dy.data, n);
        for (d, &h) in dh.iter_mut().zip(&cache.hidden_pre) {
            *d *= gelu_grad(h);
        }
        Tensor3 {
            channels: cache.input.channels,
            height: dy.height,
            width: dy.width,
            data: self.fc1.backward_raw(&cache.input.data, &dh, n),
        }
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Pre-norm residual block: `x + mix(ln1 x)` followed by `+ mlp(ln2 ·)`.
///
/// The mixing branch is channel attention, window attention, or channel
/// attention followed by window attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub channel_attention: Option<ChannelAttention>,
    pub attention: Option<WindowAttention>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    ca: Option<ChannelAttentionCache>,
    attn: Option<WindowAttentionCache>,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl BlockCache {
    pub fn attention(&self) -> Option<&WindowAttentionCache> {
        self.attn.as_ref()
    }
}

impl TransformerBlock {
    pub fn new(
        channels: usize,
        mlp_hidden: usize,
        channel_attention: Option<ChannelAttention>,
        attention: Option<WindowAttention>,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(channels),
            channel_attention,
            attention,
            ln2: LayerNorm::new(channels),
            mlp: Mlp::new(channels, mlp_hidden, rng),
        }
    }

    pub fn forward(&self, x: &Tensor3, mask: Option<&ShadowMask>) -> Result<Tensor3> {
        let mut mixed = self.ln1.forward(x);
        if let Some(ca) = &self.channel_attention {
            mixed = ca.forward(&mixed);
        }
        if let Some(attn) = &self.attention {
            mixed = attn.forward(&mixed, mask)?;
        }
        mixed.add_assign(x);
        let mut out = self.mlp.forward(&self.ln2.forward(&mixed));
        out.add_assign(&mixed);
        Ok(out)
    }

    pub fn forward_train(&self, x: &Tensor3, mask: Option<&ShadowMask>) -> Result<(Tensor3, BlockCache)> {
        let (mut mixed, ln1) = self.ln1.forward_train(x);
        let ca = self.channel_attention.as_ref().map(|ca| {
            let (y, c) = ca.forward_train(&mixed);
            mixed = y;
            c
        });
        let attn = match &self.attention {
            Some(attn) => {
                let (y, c) = attn.forward_train(&mixed, mask)?;
                mixed = y;
                Some(c)
            }
            None => None,
        };
        mixed.add_assign(x);
        let (normed, ln2) = self.ln2.forward_train(&mixed);
        let (mut out, mlp) = self.mlp.forward_train(&normed);
        out.add_assign(&mixed);
        Ok((out, BlockCache { ln1, ca, attn, ln2, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Tensor3) -> Tensor3 {
        let dnormed = self.mlp.backward(&cache.mlp, dy);
        let mut dmixed = self.ln2.backward(&cache.ln2, &dnormed);
        dmixed.add_assign(dy);
        let mut dbranch = dmixed.clone();
        if let (Some(attn), Some(c)) = (&mut self.attention, &cache.attn) {
            dbranch = attn.backward(c, &dbranch);
        }
        if let (Some(ca), Some(c)) = (&mut self.channel_attention, &cache.ca) {
            dbranch = ca.backward(c, &dbranch);
        }
        let mut dx = self.ln1.backward(&cache.ln1, &dbranch);
        dx.add_assign(&dmixed);
        dx
    }
}

impl Parameterized for TransformerBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.ln1.visit_params(f);
        self.channel_attention.visit_params(f);
        self.attention.visit_params(f);
        self.ln2.visit_params(f);
        self.mlp.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_params_mut(f);
        self.channel_attention.visit_params_mut(f);
        self.attention.visit_params_mut(f);
        self.ln2.visit_params_mut(f);
        self.mlp.visit_params_mut(f);
    }
}

//! The encoder/decoder network: convolutional embedding, channel-attention
//! transformer stages, a shadow-interaction bottleneck and a residual
//! output head (`output = input + residual`).

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::imaging::{ImageTensor, ShadowMask};
use crate::nn::{
    BlockCache, ChannelAttention, Conv2d, Conv2dCache, ConvTranspose2x2, Linear, Param, Parameterized,
    TransformerBlock, WindowAttention, WindowAttentionCache,
};
use crate::rng::{component_rng, Rng};
use crate::tensor::{FeatureMap, Tensor3};

/// Token mixer used in the encoder and decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMixer {
    ChannelAttention,
    /// Plain window self-attention (no channel attention, no mask).
    WindowAttention,
}

/// Token mixer used in the bottleneck blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckMixer {
    /// Channel attention followed by mask-reweighted window attention.
    ShadowInteraction,
    ChannelAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub window: usize,
    pub sigma: f64,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub se_reduction: usize,
    pub blocks_per_stage: usize,
    pub sim_blocks: usize,
    pub concat_mask_input: bool,
    pub stage_mixer: StageMixer,
    pub bottleneck_mixer: BottleneckMixer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    fn base(embed_dim: usize, depth: usize, mlp_ratio: f64) -> Self {
        Self {
            embed_dim,
            depth,
            window: 8,
            sigma: 0.2,
            heads: 1,
            mlp_ratio,
            se_reduction: 4,
            blocks_per_stage: 2,
            sim_blocks: 2,
            concat_mask_input: true,
            stage_mixer: StageMixer::ChannelAttention,
            bottleneck_mixer: BottleneckMixer::ShadowInteraction,
        }
    }

    /// Desk-scale training configuration.
    pub fn toy() -> Self {
        Self::base(16, 2, 4.0)
    }

    /// Two-scale encoder, 24 channels; MLP width calibrated to ~2.4M parameters.
    pub fn small() -> Self {
        Self::base(24, 2, 36.0)
    }

    /// Three-scale encoder, 32 channels; MLP width calibrated to ~9.3M parameters.
    pub fn large() -> Self {
        Self::base(32, 3, 18.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "small" => Ok(Self::small()),
            "large" => Ok(Self::large()),
            other => Err(arg_err!("unknown variant `{other}` (expected toy, small or large)")),
        }
    }

    pub fn stage_channels(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.depth)
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        ((self.mlp_ratio * channels as f64).round() as usize).max(1)
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.window << self.depth
    }

    pub fn input_channels(&self) -> usize {
        if self.concat_mask_input {
            4
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window == 0 || self.blocks_per_stage == 0 || self.sim_blocks == 0 {
            return Err(arg_err!("embed_dim, window, blocks_per_stage and sim_blocks must be positive"));
        }
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(arg_err!("sigma must lie in [0, 1), got {}", self.sigma));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(arg_err!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if self.se_reduction == 0 || self.se_reduction > self.embed_dim {
            return Err(arg_err!(
                "se_reduction must lie in 1..={}, got {}",
                self.embed_dim,
                self.se_reduction
            ));
        }
        if self.heads == 0 || !self.bottleneck_channels().is_multiple_of(self.heads) {
            return Err(arg_err!(
                "{} bottleneck channels cannot be split into {} heads",
                self.bottleneck_channels(),
                self.heads
            ));
        }
        if self.stage_mixer == StageMixer::WindowAttention && !self.embed_dim.is_multiple_of(self.heads) {
            return Err(arg_err!("{} channels cannot be split into {} heads", self.embed_dim, self.heads));
        }
        Ok(())
    }

    /// Checks that an `h × w` input fits the network without padding.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
            let ph = h.div_ceil(m).max(1) * m;
            let pw = w.div_ceil(m).max(1) * m;
            return Err(shape_err!(
                "input {h}x{w} must be a multiple of {m} (window {} x 2^{}); pad to {ph}x{pw}",
                self.window,
                self.depth
            ));
        }
        Ok(())
    }
}

/// Max-pools a mask by `2^levels`: a cell is shadow if any pixel in it is.
pub fn pool_mask(mask: &ShadowMask, levels: usize) -> Result<ShadowMask> {
    let f = 1usize << levels;
    let (h, w) = (mask.height(), mask.width());
    if h % f != 0 || w % f != 0 {
        return Err(shape_err!("mask {h}x{w} is not divisible by {f}"));
    }
    let mut out = ShadowMask::filled(h / f, w / f, false);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                out.set(y / f, x / f, true);
            }
        }
    }
    Ok(out)
}

fn stage_block(cfg: &ModelConfig, channels: usize, rng: &mut Rng) -> TransformerBlock {
    let hidden = cfg.mlp_hidden(channels);
    match cfg.stage_mixer {
        StageMixer::ChannelAttention => TransformerBlock::new(
            channels,
            hidden,
            Some(ChannelAttention::new(channels, cfg.se_reduction, rng)),
            None,
            rng,
        ),
        StageMixer::WindowAttention => TransformerBlock::new(
            channels,
            hidden,
            None,
            Some(WindowAttention::new(channels, cfg.heads, cfg.window, 0.0, rng)),
            rng,
        ),
    }
}

fn bottleneck_block(cfg: &ModelConfig, rng: &mut Rng) -> TransformerBlock {
    let c = cfg.bottleneck_channels();
    let ca = Some(ChannelAttention::new(c, cfg.se_reduction, rng));
    let attn = match cfg.bottleneck_mixer {
        BottleneckMixer::ShadowInteraction => Some(WindowAttention::new(c, cfg.heads, cfg.window, cfg.sigma, rng)),
        BottleneckMixer::ChannelAttention => None,
    };
    TransformerBlock::new(c, cfg.mlp_hidden(c), ca, attn, rng)
}

/// Transformer blocks at one resolution followed by a stride-2 4×4
/// convolution that halves the spatial size and doubles the channels.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub blocks: Vec<TransformerBlock>,
    pub down: Conv2d,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    down: Conv2dCache,
}

impl EncoderStage {
    /// Returns `(skip, downsampled)`.
    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
            return Err(shape_err!("encoder stage needs even size, got {}x{}", x.height, x.width));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, None)?;
        }
        let down = self.down.forward(&h);
        Ok((h, down))
    }

    fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap, EncoderCache)> {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_train(&h, None)?;
            blocks.push(c);
            h = y;
        }
        let (down, dc) = self.down.forward_train(&h);
        Ok((h, down, EncoderCache { blocks, down: dc }))
    }

    fn backward(&mut self, cache: &EncoderCache, dskip: Tensor3, ddown: &Tensor3) -> Tensor3 {
        let mut d = self.down.backward(&cache.down, ddown);
        d.add_assign(&dskip);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        d
    }
}

impl Parameterized for EncoderStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.blocks.visit_params(f);
        self.down.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.visit_params_mut(f);
        self.down.visit_params_mut(f);
    }
}

/// 2× transposed-convolution upsampling, concatenation with the encoder
/// skip, a 1×1 fusion back to the stage width, then transformer blocks.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: ConvTranspose2x2,
    pub fuse: Linear,
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    input: Tensor3,
    concat: Tensor3,
    blocks: Vec<BlockCache>,
}

impl DecoderStage {
    fn check_skip(&self, x: &FeatureMap, skip: &FeatureMap) -> Result<()> {
        let expected = (self.fuse.out_features, x.height * 2, x.width * 2);
        if skip.shape() != expected {
            return Err(shape_err!("decoder skip is {:?}, expected {:?}", skip.shape(), expected));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap, skip: &FeatureMap) -> Result<FeatureMap> {
        self.check_skip(x, skip)?;
        let up = self.up.forward(x);
        let mut h = self.fuse.forward(&up.concat_channels(skip)?);
        for b in &self.blocks {
            h = b.forward(&h, None)?;
        }
        Ok(h)
    }

    fn forward_train(&self, x: &FeatureMap, skip: &FeatureMap) -> Result<(FeatureMap, DecoderCache)> {
        self.check_skip(x, skip)?;
        let concat = self.up.forward(x).concat_channels(skip)?;
        let mut h = self.fuse.forward(&concat);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_train(&h, None)?;
            blocks.push(c);
            h = y;
        }
        Ok((
            h,
            DecoderCache {
                input: x.clone(),
                concat,
                blocks,
            },
        ))
    }

    /// Returns `(d_input, d_skip)`.
    fn backward(&mut self, cache: &DecoderCache, dy: &Tensor3) -> (Tensor3, Tensor3) {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        let dconcat = self.fuse.backward(&cache.concat, &d);
        let (dup, dskip) = dconcat.split_channels(self.fuse.out_features);
        (self.up.backward(&cache.input, &dup), dskip)
    }
}

impl Parameterized for DecoderStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.up.visit_params(f);
        self.fuse.visit_params(f);
        self.blocks.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.up.visit_params_mut(f);
        self.fuse.visit_params_mut(f);
        self.blocks.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct ShadowFormer {
    config: ModelConfig,
    pub embed: Conv2d,
    pub encoders: Vec<EncoderStage>,
    pub bottleneck: Vec<TransformerBlock>,
    /// Deepest stage first.
    pub decoders: Vec<DecoderStage>,
    pub output: Conv2d,
}

/// Everything [`ShadowFormer::backward`] needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ModelCache {
    embed: Conv2dCache,
    encoders: Vec<EncoderCache>,
    bottleneck: Vec<BlockCache>,
    decoders: Vec<DecoderCache>,
    output: Conv2dCache,
}

impl ModelCache {
    /// Attention state of the last bottleneck block, if it has attention.
    pub fn last_bottleneck_attention(&self) -> Option<&WindowAttentionCache> {
        self.bottleneck.last().and_then(|b| b.attention())
    }
}

/// Feature shapes `X_0 … X_L` observed on the encoder path.
pub type EncoderShapes = Vec<(usize, usize, usize)>;

impl ShadowFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = component_rng(seed, "model-init");
        let cfg = &config;
        let c0 = cfg.embed_dim;
        let embed = Conv2d::new(cfg.input_channels(), c0, 3, 1, 1, &mut rng);
        let encoders = (0..cfg.depth)
            .map(|l| {
                let c = cfg.stage_channels(l);
                let blocks = (0..cfg.blocks_per_stage).map(|_| stage_block(cfg, c, &mut rng)).collect();
                EncoderStage {
                    blocks,
                    down: Conv2d::new(c, 2 * c, 4, 2, 1, &mut rng),
                }
            })
            .collect();
        let bottleneck = (0..cfg.sim_blocks).map(|_| bottleneck_block(cfg, &mut rng)).collect();
        let decoders = (0..cfg.depth)
            .rev()
            .map(|l| {
                let c = cfg.stage_channels(l);
                let up = ConvTranspose2x2::new(2 * c, c, &mut rng);
                let fuse = Linear::new(2 * c, c, &mut rng);
                let blocks = (0..cfg.blocks_per_stage).map(|_| stage_block(cfg, c, &mut rng)).collect();
                DecoderStage { up, fuse, blocks }
            })
            .collect();
        let output = Conv2d::zeroed(c0, 3, 3, 1, 1);
        Ok(Self {
            config,
            embed,
            encoders,
            bottleneck,
            decoders,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_inputs(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<()> {
        if img.channels() != 3 {
            return Err(shape_err!("model input must have 3 channels, got {}", img.channels()));
        }
        if !mask.matches(img) {
            return Err(shape_err!(
                "mask {}x{} does not match image {}x{}",
                mask.height(),
                mask.width(),
                img.height(),
                img.width()
            ));
        }
        self.config.check_input_size(img.height(), img.width())
    }

    fn network_input(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<Tensor3> {
        self.check_inputs(img, mask)?;
        if self.config.concat_mask_input {
            img.tensor().concat_channels(mask.to_image().tensor())
        } else {
            Ok(img.tensor().clone())
        }
    }

    /// The full-resolution `C`-channel embedding `X_0`.
    pub fn embed_input(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<FeatureMap> {
        Ok(self.embed.forward(&self.network_input(img, mask)?))
    }

    fn bottleneck_mask(&self, mask: &ShadowMask) -> Result<Option<ShadowMask>> {
        match self.config.bottleneck_mixer {
            BottleneckMixer::ShadowInteraction => Ok(Some(pool_mask(mask, self.config.depth)?)),
            BottleneckMixer::ChannelAttention => Ok(None),
        }
    }

    /// Unclamped prediction `input + residual`, plus the encoder feature shapes.
    pub fn forward_traced(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<(ImageTensor, EncoderShapes)> {
        let mut x = self.embed_input(img, mask)?;
        let pooled = self.bottleneck_mask(mask)?;
        let mut shapes = vec![x.shape()];
        let mut skips = Vec::with_capacity(self.encoders.len());
        for stage in &self.encoders {
            let (skip, down) = stage.forward(&x)?;
            skips.push(skip);
            x = down;
            shapes.push(x.shape());
        }
        for b in &self.bottleneck {
            x = b.forward(&x, pooled.as_ref())?;
        }
        for stage in &self.decoders {
            let skip = skips.pop().expect("one skip per stage");
            x = stage.forward(&x, &skip)?;
        }
        let mut out = self.output.forward(&x);
        out.add_assign(img.tensor());
        Ok((ImageTensor::new(out)?, shapes))
    }

    /// Unclamped prediction `input + residual`.
    pub fn forward(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<ImageTensor> {
        Ok(self.forward_traced(img, mask)?.0)
    }

    /// Prediction clamped to `[0, 1]`, for inference only.
    pub fn predict(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<ImageTensor> {
        Ok(self.forward(img, mask)?.clamped())
    }

    pub fn forward_train(&self, img: &ImageTensor, mask: &ShadowMask) -> Result<(Tensor3, ModelCache)> {
        let input = self.network_input(img, mask)?;
        let pooled = self.bottleneck_mask(mask)?;
        let (mut x, embed) = self.embed.forward_train(&input);
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for stage in &self.encoders {
            let (skip, down, c) = stage.forward_train(&x)?;
            skips.push(skip);
            encoders.push(c);
            x = down;
        }
        let mut bottleneck = Vec::with_capacity(self.bottleneck.len());
        for b in &self.bottleneck {
            let (y, c) = b.forward_train(&x, pooled.as_ref())?;
            bottleneck.push(c);
            x = y;
        }
        let mut decoders = Vec::with_capacity(self.decoders.len());
        for stage in &self.decoders {
            let skip = skips.pop().expect("one skip per stage");
            let (y, c) = stage.forward_train(&x, &skip)?;
            decoders.push(c);
            x = y;
        }
        let (mut out, output) = self.output.forward_train(&x);
        out.add_assign(img.tensor());
        Ok((
            out,
            ModelCache {
                embed,
                encoders,
                bottleneck,
                decoders,
                output,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/d(output)` and returns
    /// `dL/d(image)`.
    pub fn backward(&mut self, cache: &ModelCache, dout: &Tensor3) -> Tensor3 {
        let mut d = self.output.backward(&cache.output, dout);
        let mut dskips = Vec::with_capacity(self.decoders.len());
        for (stage, c) in self.decoders.iter_mut().zip(&cache.decoders).rev() {
            let (dx, dskip) = stage.backward(c, &d);
            dskips.push(dskip);
            d = dx;
        }
        // Decoders run deepest first, so dskips is indexed by level.
        for (b, c) in self.bottleneck.iter_mut().zip(&cache.bottleneck).rev() {
            d = b.backward(c, &d);
        }
        for ((stage, c), dskip) in self.encoders.iter_mut().zip(&cache.encoders).zip(dskips).rev() {
            d = stage.backward(c, dskip, &d);
        }
        let dinput = self.embed.backward(&cache.embed, &d);
        let (mut dimg, _) = dinput.split_channels(3);
        dimg.add_assign(dout);
        dimg
    }
}

impl Parameterized for ShadowFormer {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.embed.visit_params(f);
        self.encoders.visit_params(f);
        self.bottleneck.visit_params(f);
        self.decoders.visit_params(f);
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.embed.visit_params_mut(f);
        self.encoders.visit_params_mut(f);
        self.bottleneck.visit_params_mut(f);
        self.decoders.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

/// Exact number of trainable scalars, computed from layer shapes alone.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let linear = |cin: usize, cout: usize| cin * cout + cout;
    let norm = |c: usize| 2 * c;
    let ca = |c: usize| {
        let hidden = (c / cfg.se_reduction.max(1)).max(1);
        linear(c, hidden) + linear(hidden, c)
    };
    let attn = |c: usize| linear(c, 3 * c) + linear(c, c);
    let mlp = |c: usize| {
        let h = cfg.mlp_hidden(c);
        linear(c, h) + linear(h, c)
    };
    let stage_block = |c: usize| {
        let mixer = match cfg.stage_mixer {
            StageMixer::ChannelAttention => ca(c),
            StageMixer::WindowAttention => attn(c),
        };
        2 * norm(c) + mixer + mlp(c)
    };
    let cb = cfg.bottleneck_channels();
    let sim = 2 * norm(cb)
        + ca(cb)
        + match cfg.bottleneck_mixer {
            BottleneckMixer::ShadowInteraction => attn(cb),
            BottleneckMixer::ChannelAttention => 0,
        }
        + mlp(cb);
    let mut total = conv(cfg.input_channels(), cfg.embed_dim, 3) + conv(cfg.embed_dim, 3, 3);
    for l in 0..cfg.depth {
        let c = cfg.stage_channels(l);
        let stage = cfg.blocks_per_stage * stage_block(c);
        total += stage + conv(c, 2 * c, 4);
        total += stage + (2 * c * c * 4 + c) + linear(2 * c, c);
    }
    total + cfg.sim_blocks * sim
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;

    fn grad_toy() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            depth: 1,
            window: 4,
            ..ModelConfig::toy()
        }
    }

    fn image(h: usize, w: usize, salt: u64) -> ImageTensor {
        let v = probe(3 * h * w, salt).iter().map(|x| 0.5 + 0.4 * x).collect();
        ImageTensor::new(Tensor3::from_vec(3, h, w, v).unwrap()).unwrap()
    }

    fn blob(h: usize, w: usize) -> ShadowMask {
        ShadowMask::from_fn(h, w, |y, x| (y as f64 - 5.0).powi(2) + (x as f64 - 6.0).powi(2) < 20.0)
    }

    #[test]
    fn toy_count_matches_hand_sum() {
        // C=8, L=1, mlp hidden 4C, SE hidden C/4, 4 input channels.
        let embed = 4 * 8 * 9 + 8;
        let ca8 = (8 * 2 + 2) + (2 * 8 + 8);
        let mlp8 = (8 * 32 + 32) + (32 * 8 + 8);
        let block8 = 2 * 16 + ca8 + mlp8;
        let down = 8 * 16 * 16 + 16;
        let ca16 = (16 * 4 + 4) + (4 * 16 + 16);
        let attn16 = (16 * 48 + 48) + (16 * 16 + 16);
        let mlp16 = (16 * 64 + 64) + (64 * 16 + 16);
        let sim16 = 2 * 32 + ca16 + attn16 + mlp16;
        let up = 16 * 8 * 4 + 8;
        let fuse = 16 * 8 + 8;
        let out = 8 * 3 * 9 + 3;
        let expected = embed + 2 * block8 + down + 2 * sim16 + up + fuse + 2 * block8 + out;
        let cfg = grad_toy();
        assert_eq!(param_count(&cfg), expected);
        assert_eq!(ShadowFormer::new(cfg, 0).unwrap().num_params(), expected);
    }

    #[test]
    fn closed_form_count_matches_built_models() {
        for cfg in [
            ModelConfig::toy(),
            ModelConfig {
                stage_mixer: StageMixer::WindowAttention,
                ..ModelConfig::toy()
            },
            ModelConfig {
                bottleneck_mixer: BottleneckMixer::ChannelAttention,
                concat_mask_input: false,
                ..ModelConfig::toy()
            },
        ] {
            assert_eq!(ShadowFormer::new(cfg.clone(), 1).unwrap().num_params(), param_count(&cfg));
        }
    }

    #[test]
    fn pool_mask_examples() {
        let zero = ShadowMask::filled(4, 4, false);
        assert_eq!(pool_mask(&zero, 1).unwrap().count(), 0);
        let one = ShadowMask::filled(8, 8, true);
        assert_eq!(pool_mask(&one, 2).unwrap().count(), 4);
        let mut m = ShadowMask::filled(4, 4, false);
        m.set(0, 0, true);
        let p = pool_mask(&m, 1).unwrap();
        assert_eq!(p.data(), &[true, false, false, false]);
        assert!(pool_mask(&ShadowMask::filled(6, 4, false), 2).is_err());
    }

    #[test]
    fn initial_output_equals_input() {
        let model = ShadowFormer::new(ModelConfig::toy(), 3).unwrap();
        let img = image(32, 32, 4);
        let out = model.forward(&img, &blob(32, 32)).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn shape_errors_name_the_padding() {
        let model = ShadowFormer::new(ModelConfig::toy(), 0).unwrap();
        let err = model.forward(&image(40, 32, 1), &blob(40, 32)).unwrap_err();
        assert!(err.to_string().contains("64x32"), "{err}");
        assert!(model.forward(&image(32, 32, 1), &blob(16, 32)).is_err());
    }

    #[test]
    fn encoder_shapes_follow_the_contract() {
        let cfg = ModelConfig {
            embed_dim: 6,
            depth: 2,
            window: 2,
            heads: 2,
            ..ModelConfig::toy()
        };
        let model = ShadowFormer::new(cfg, 0).unwrap();
        let (out, shapes) = model.forward_traced(&image(16, 16, 2), &blob(16, 16)).unwrap();
        assert_eq!(shapes, vec![(6, 16, 16), (12, 8, 8), (24, 4, 4)]);
        assert_eq!(out.tensor().shape(), (3, 16, 16));
    }

    #[test]
    fn embedding_of_zero_input_is_the_bias() {
        let model = ShadowFormer::new(ModelConfig::toy(), 0).unwrap();
        let zero = ImageTensor::filled(3, 32, 32, 0.0).unwrap();
        let x = model.embed_input(&zero, &ShadowMask::filled(32, 32, false)).unwrap();
        assert_eq!(x.shape(), (16, 32, 32));
        for c in 0..16 {
            assert!(x.plane(c).iter().all(|&v| v == model.embed.bias.value[c]));
        }
    }

    fn randomized(cfg: ModelConfig, seed: u64) -> ShadowFormer {
        let mut model = ShadowFormer::new(cfg, seed).unwrap();
        let v: Vec<f64> = probe(model.num_params(), seed).iter().map(|x| 0.3 * x).collect();
        model.set_flat_values(&v);
        model
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut model = randomized(grad_toy(), 5);
        let img = image(16, 16, 7);
        let mask = blob(16, 16);
        let (out, cache) = model.forward_train(&img, &mask).unwrap();
        let w = probe(out.data.len(), 11);
        model.zero_grad();
        let dimg = model.backward(&cache, &Tensor3::from_vec(3, 16, 16, w.clone()).unwrap());
        let loss = |m: &ShadowFormer, x: &ImageTensor| dot(m.forward(x, &mask).unwrap().data(), &w);

        let analytic = model.flat_grads();
        let pidx = sample_indices(analytic.len(), 400);
        let num = numeric_param_grad(&mut model, &pidx, 1e-5, |m| loss(m, &img));
        let picked: Vec<f64> = pidx.iter().map(|&i| analytic[i]).collect();
        assert!(rel_error(&picked, &num) < 1e-6, "{}", rel_error(&picked, &num));

        let idx = sample_indices(img.data().len(), 100);
        let num = numeric_input_grad(img.tensor(), &idx, 1e-5, |t| {
            loss(&model, &ImageTensor::new(t.clone()).unwrap())
        });
        let picked: Vec<f64> = idx.iter().map(|&i| dimg.data[i]).collect();
        assert!(rel_error(&picked, &num) < 1e-6);
    }

    #[test]
    fn ablation_variants_backpropagate() {
        for cfg in [
            ModelConfig {
                stage_mixer: StageMixer::WindowAttention,
                ..grad_toy()
            },
            ModelConfig {
                bottleneck_mixer: BottleneckMixer::ChannelAttention,
                ..grad_toy()
            },
        ] {
            let mut model = randomized(cfg, 2);
            let img = image(16, 16, 3);
            let mask = blob(16, 16);
            let (out, cache) = model.forward_train(&img, &mask).unwrap();
            let w = probe(out.data.len(), 4);
            model.zero_grad();
            model.backward(&cache, &Tensor3::from_vec(3, 16, 16, w.clone()).unwrap());
            let analytic = model.flat_grads();
            let pidx = sample_indices(analytic.len(), 120);
            let num = numeric_param_grad(&mut model, &pidx, 1e-5, |m| dot(m.forward(&img, &mask).unwrap().data(), &w));
            let picked: Vec<f64> = pidx.iter().map(|&i| analytic[i]).collect();
            assert!(rel_error(&picked, &num) < 1e-6);
        }
    }

    #[test]
    fn forward_train_agrees_with_forward() {
        let model = randomized(ModelConfig::toy(), 8);
        let img = image(32, 32, 1);
        let mask = blob(32, 32);
        let a = model.forward(&img, &mask).unwrap();
        let (b, _) = model.forward_train(&img, &mask).unwrap();
        assert!(a.tensor().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn presets_validate() {
        for name in ["toy", "small", "large"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
        let bad = ModelConfig {
            sigma: 1.0,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
    }
}

//! ℓ1 training with AdamW and a cosine learning-rate schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState, StreamState};
use crate::datasets::{BatchOptions, BatchStream, Sample, TripletRecord};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::imaging::ImageTensor;
use crate::model::{ModelConfig, ShadowFormer};
use crate::nn::{Param, Parameterized};
use crate::rng::derive_seed;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub augment_flips: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_final: 1e-6,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.02,
            total_steps: 2000,
            batch_size: 4,
            crop_size: 64,
            seed: 0,
            augment_flips: true,
            max_grad_norm: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-resolution crops.
    pub fn paper_scale() -> Self {
        Self {
            crop_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final <= self.lr_init && self.lr_final >= 0.0) {
            return Err(arg_err!("need 0 <= lr_final <= lr_init"));
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return Err(arg_err!("batch_size and crop_size must be positive"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(arg_err!("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    Ok(l1_loss_with_grad(pred.tensor(), gt.tensor())?.0)
}

/// ℓ1 loss and its gradient w.r.t. `pred` (sign / n, zero at ties).
pub fn l1_loss_with_grad(pred: &Tensor3, gt: &Tensor3) -> Result<(f64, Tensor3)> {
    if !pred.same_shape(gt) {
        return Err(shape_err!("loss inputs {:?} and {:?} differ", pred.shape(), gt.shape()));
    }
    let n = pred.data.len() as f64;
    let mut grad = Tensor3::zeros(pred.channels, pred.height, pred.width);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// `lr_final + ½(lr_init − lr_final)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(arg_err!("step {step} is past the schedule end {}", cfg.total_steps));
    }
    if cfg.total_steps == 0 {
        return Ok(cfg.lr_init);
    }
    let t = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (PI * t).cos()))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: OptimizerState {
                first_moment: vec![0.0; num_params],
                second_moment: vec![0.0; num_params],
                updates: 0,
            },
        }
    }

    pub fn with_state(state: OptimizerState, cfg: &TrainConfig) -> Self {
        Self {
            state,
            ..Self::new(0, cfg)
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut dyn Parameterized, lr: f64) {
        self.state.updates += 1;
        let t = self.state.updates as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let m = &mut self.state.first_moment;
        let v = &mut self.state.second_moment;
        let mut offset = 0;
        params.visit_params_mut(&mut |p: &mut Param| {
            for i in 0..p.len() {
                let k = offset + i;
                let g = p.grad[i];
                p.value[i] -= lr * wd * p.value[i];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            offset += p.len();
        });
        debug_assert_eq!(offset, m.len());
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ShadowFormer,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: ShadowFormer, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(model.num_params(), cfg);
        Self {
            model,
            optimizer,
            step: 0,
        }
    }

    pub fn checkpoint(&self, stream: Option<StreamState>) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.step as u64);
        ck.optimizer = Some(self.optimizer.state().clone());
        ck.stream = stream;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let model = ck.to_model()?;
        let optimizer = match &ck.optimizer {
            Some(o) => AdamW::with_state(o.clone(), cfg),
            None => AdamW::new(model.num_params(), cfg),
        };
        Ok(Self {
            model,
            optimizer,
            step: ck.step as usize,
        })
    }
}

fn grad_norm(model: &ShadowFormer) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
    sq.sqrt()
}

/// Forward, backward and one optimizer update on `batch`; returns the
/// batch-mean loss measured before the update.
pub fn train_step(state: &mut TrainState, batch: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    let lr = cosine_lr(state.step.min(cfg.total_steps), cfg)?;
    state.model.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for sample in batch {
        let t = &sample.triplet;
        let (pred, cache) = state.model.forward_train(&t.shadow, &t.mask)?;
        let (l, mut grad) = l1_loss_with_grad(&pred, t.target.tensor())?;
        grad.data.iter_mut().for_each(|g| *g *= scale);
        state.model.backward(&cache, &grad);
        loss += l * scale;
    }
    if !loss.is_finite() {
        return Err(Error::Training {
            step: state.step,
            message: format!("loss is {loss}"),
        });
    }
    if let Some(max) = cfg.max_grad_norm {
        let norm = grad_norm(&state.model);
        if norm > max {
            let k = max / norm;
            state
                .model
                .visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= k));
        }
    }
    state.optimizer.step(&mut state.model, lr);
    state.step += 1;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` lines with a header.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:.10}", r.step, r.lr, r.loss);
    }
    s
}

/// Mean of the first and last `window` losses.
pub fn moving_average_ends(history: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossRecord>,
}

/// Trains a fresh model for `cfg.total_steps` steps. When `out_dir` is
/// given, checkpoints are written as `step_{n}` every
/// `cfg.checkpoint_every` steps and `final` at the end.
pub fn train_loop(
    records: Vec<TripletRecord>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    let model = ShadowFormer::new(model_cfg.clone(), derive_seed(cfg.seed, "model"))?;
    let state = TrainState::new(model, cfg);
    continue_training(state, records, cfg, out_dir)
}

/// Runs from `state.step` up to `cfg.total_steps`.
pub fn continue_training(
    mut state: TrainState,
    records: Vec<TripletRecord>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let data_seed = derive_seed(cfg.seed, "data");
    let mut stream = BatchStream::new(
        records,
        BatchOptions {
            batch_size: cfg.batch_size,
            crop: Some(cfg.crop_size),
            seed: data_seed,
            augment_flips: cfg.augment_flips,
        },
    )?;
    stream.seek((state.step * cfg.batch_size) as u64);
    let save = |state: &TrainState, stream: &BatchStream, name: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            let ck = state.checkpoint(Some(StreamState {
                seed: data_seed,
                cursor: stream.cursor(),
            }));
            ck.save(&dir.join(name))?;
        }
        Ok(())
    };
    let mut history = Vec::with_capacity(cfg.total_steps.saturating_sub(state.step));
    while state.step < cfg.total_steps {
        let batch = stream.next_batch()?;
        let step = state.step;
        let lr = cosine_lr(step, cfg)?;
        let loss = train_step(&mut state, &batch, cfg)?;
        history.push(LossRecord { step, lr, loss });
        if step.is_multiple_of(100) {
            log::info!("step {step} lr {lr:.3e} loss {loss:.5}");
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) && state.step < cfg.total_steps {
            save(&state, &stream, &format!("step_{}", state.step))?;
        }
    }
    save(&state, &stream, "final")?;
    Ok(TrainOutcome { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::CropInfo;
    use crate::datasets::Triplet;
    use crate::imaging::ShadowMask;
    use crate::nn::gradcheck::probe;

    #[test]
    fn l1_examples() {
        let a = ImageTensor::filled(3, 4, 4, 0.3).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = ImageTensor::filled(3, 4, 4, 0.4).unwrap();
        assert!((l1_loss(&b, &a).unwrap() - 0.1).abs() < 1e-15);
        let c = ImageTensor::filled(3, 4, 5, 0.4).unwrap();
        assert!(l1_loss(&a, &c).is_err());
    }

    #[test]
    fn l1_matches_direct_sum() {
        let p = Tensor3::from_vec(3, 5, 7, probe(105, 1)).unwrap();
        let g = Tensor3::from_vec(3, 5, 7, probe(105, 2)).unwrap();
        let mut oracle = 0.0;
        for i in 0..105 {
            oracle += (p.data[i] - g.data[i]).abs();
        }
        oracle /= 105.0;
        let (l, _) = l1_loss_with_grad(&p, &g).unwrap();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 2e-4);
        assert!((cosine_lr(1000, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(500, &cfg).unwrap() - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(1001, &cfg).is_err());
        let lrs: Vec<f64> = (0..=1000).map(|s| cosine_lr(s, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    struct Scalar(Param);

    impl Parameterized for Scalar {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn single_scalar_update_matches_hand_evaluation() {
        // θ=1, g=0.5, lr=0.1, wd=0.02, β=(0.9,0.999), eps=1e-8, first step:
        // decay: 1 − 0.1·0.02·1 = 0.998
        // m̂ = 0.05/0.1 = 0.5, v̂ = 0.00025/0.001 = 0.25, step = 0.1·0.5/(0.5+1e-8)
        let cfg = TrainConfig::default();
        let mut p = Scalar(Param::filled(1, 1.0));
        p.0.grad[0] = 0.5;
        let mut opt = AdamW::new(1, &cfg);
        opt.step(&mut p, 0.1);
        let expected = 0.998 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.0.value[0] - expected).abs() < 1e-15, "{}", p.0.value[0]);
    }

    fn toy_batch() -> Vec<Sample> {
        let h = 32;
        let mask = ShadowMask::from_fn(h, h, |y, x| x + y < 24);
        let target = ImageTensor::filled(3, h, h, 0.6).unwrap();
        let mut shadow = target.tensor().clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..h {
                    if mask.get(y, x) {
                        let i = shadow.idx(c, y, x);
                        shadow.data[i] *= 0.4;
                    }
                }
            }
        }
        vec![Sample {
            triplet: Triplet {
                id: "t".into(),
                shadow: ImageTensor::new(shadow).unwrap(),
                mask,
                target,
            },
            crop: CropInfo {
                y0: 0,
                x0: 0,
                height: h,
                width: h,
                flip_horizontal: false,
                flip_vertical: false,
            },
        }]
    }

    #[test]
    fn zero_lr_and_decay_leave_weights_bitwise_unchanged() {
        let cfg = TrainConfig {
            lr_init: 0.0,
            lr_final: 0.0,
            weight_decay: 0.0,
            total_steps: 3,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(ShadowFormer::new(ModelConfig::toy(), 1).unwrap(), &cfg);
        let before = state.model.flat_values();
        for _ in 0..3 {
            train_step(&mut state, &toy_batch(), &cfg).unwrap();
        }
        assert_eq!(state.model.flat_values(), before);
    }

    #[test]
    fn tiny_lr_step_does_not_increase_loss() {
        let cfg = TrainConfig {
            lr_init: 1e-6,
            lr_final: 1e-6,
            weight_decay: 0.0,
            total_steps: 10,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(ShadowFormer::new(ModelConfig::toy(), 2).unwrap(), &cfg);
        let batch = toy_batch();
        // Move off the zero-initialized head so every layer receives gradient.
        for _ in 0..3 {
            train_step(&mut state, &batch, &cfg).unwrap();
        }
        let before = train_step(&mut state, &batch, &cfg).unwrap();
        let t = &batch[0].triplet;
        let after = l1_loss(&state.model.forward(&t.shadow, &t.mask).unwrap(), &t.target).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(ShadowFormer::new(ModelConfig::toy(), 1).unwrap(), &cfg);
        state.step = 5;
        let n = state.model.num_params();
        state.model.set_flat_values(&vec![f64::NAN; n]);
        match train_step(&mut state, &toy_batch(), &cfg) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 5),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn history_csv_format() {
        let csv = history_csv(&[LossRecord {
            step: 0,
            lr: 2e-4,
            loss: 0.125,
        }]);
        assert_eq!(csv, "step,lr,loss\n0,2e-4,0.1250000000\n");
    }
}

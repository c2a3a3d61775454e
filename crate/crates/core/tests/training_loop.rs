use shadowformer_core::checkpoint::Checkpoint;
use shadowformer_core::datasets::{scan, DatasetSpec, Layout, Split, TripletRecord};
use shadowformer_core::nn::Parameterized;
use shadowformer_core::retinex::{generate_dataset, SceneParams};
use shadowformer_core::rng::derive_seed;
use shadowformer_core::training::{continue_training, train_loop, TrainConfig, TrainState};
use shadowformer_core::{ModelConfig, ShadowFormer};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        depth: 1,
        window: 4,
        ..ModelConfig::toy()
    }
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        batch_size: 2,
        crop_size: 16,
        lr_init: 1e-3,
        ..TrainConfig::default()
    }
}

fn records(dir: &std::path::Path) -> Vec<TripletRecord> {
    generate_dataset(5, 24, 24, 7, dir, "train", &SceneParams::default()).unwrap();
    scan(&DatasetSpec::new(dir, Layout::Synthetic, Split::Train)).unwrap()
}

#[test]
fn zero_steps_returns_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(dir.path());
    let cfg = tiny_train(0);
    let out = train_loop(recs, &cfg, &tiny_model(), Some(&dir.path().join("run"))).unwrap();
    assert!(out.history.is_empty());
    let fresh = ShadowFormer::new(tiny_model(), derive_seed(cfg.seed, "model")).unwrap();
    assert_eq!(out.state.model.flat_values(), fresh.flat_values());
    let ck = Checkpoint::load(&dir.path().join("run/final")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.weights, fresh.flat_values());
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(dir.path());
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..tiny_train(6)
    };
    let run = dir.path().join("run");
    let a = train_loop(recs.clone(), &cfg, &tiny_model(), Some(&run)).unwrap();
    let b = train_loop(recs.clone(), &cfg, &tiny_model(), None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.state.model.flat_values(), b.state.model.flat_values());
    assert!(a.history.iter().all(|r| r.loss.is_finite()));

    let ck = Checkpoint::load(&run.join("step_3")).unwrap();
    assert_eq!(ck.stream.unwrap().cursor, 6);
    let state = TrainState::from_checkpoint(&ck, &cfg).unwrap();
    let resumed = continue_training(state, recs, &cfg, None).unwrap();
    assert_eq!(resumed.history, a.history[3..]);
    assert_eq!(resumed.state.model.flat_values(), a.state.model.flat_values());
}

#[test]
fn different_seeds_diverge() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(dir.path());
    let a = train_loop(recs.clone(), &tiny_train(2), &tiny_model(), None).unwrap();
    let b = train_loop(recs, &TrainConfig { seed: 1, ..tiny_train(2) }, &tiny_model(), None).unwrap();
    assert_ne!(a.history, b.history);
}

#[test]
fn frozen_optimiser_keeps_weights() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(dir.path());
    let cfg = TrainConfig {
        lr_init: 0.0,
        lr_final: 0.0,
        weight_decay: 0.0,
        ..tiny_train(3)
    };
    let out = train_loop(recs, &cfg, &tiny_model(), None).unwrap();
    let fresh = ShadowFormer::new(tiny_model(), derive_seed(cfg.seed, "model")).unwrap();
    assert_eq!(out.state.model.flat_values(), fresh.flat_values());
}

use std::fs;
use std::path::Path;

use shadowformer_core::imaging::load_image;
use shadowformer_core::retinex::{
    compose_shadow, generate_dataset, item_stem, manifest_path, sample_scene, sample_scene_with, Manifest,
    SceneParams,
};

const QUANT: f64 = 0.5 / 255.0 + 1e-9;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn empty_dataset_has_skeleton_and_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(0, 32, 32, 1, dir.path(), "train", &SceneParams::default()).unwrap();
    assert!(m.entries.is_empty());
    for s in ["A", "B", "C"] {
        assert!(dir.path().join(format!("train_{s}")).is_dir());
    }
    let text = fs::read_to_string(manifest_path(dir.path(), "train")).unwrap();
    assert!(text.is_empty());
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["train_A", "train_B", "train_C"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out.push(("manifest".into(), fs::read(manifest_path(dir, "train")).unwrap()));
    out
}

#[test]
fn regeneration_reproduces_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(4, 32, 48, 7, a.path(), "train", &SceneParams::default()).unwrap();
    generate_dataset(4, 32, 48, 7, b.path(), "train", &SceneParams::default()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 13);
    assert_eq!(fa, files(b.path()));
}

#[test]
fn stored_triplets_recompose_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(6, 40, 40, 100, dir.path(), "test", &SceneParams::default()).unwrap();
    let parsed = Manifest::parse(&fs::read_to_string(manifest_path(dir.path(), "test")).unwrap()).unwrap();
    assert_eq!(parsed.entries.len(), manifest.entries.len());
    for e in &parsed.entries {
        assert_eq!(e.seed, 100 + e.index as u64);
        let scene = sample_scene(40, 40, e.seed).unwrap();
        let (shadow, free) = compose_shadow(&scene).unwrap();
        let name = format!("{}.png", item_stem(e.index));
        let stored_a = load_image(&dir.path().join("test_A").join(&name)).unwrap();
        let stored_c = load_image(&dir.path().join("test_C").join(&name)).unwrap();
        let stored_b = load_image(&dir.path().join("test_B").join(&name)).unwrap();
        assert!(max_diff(stored_a.data(), shadow.data()) <= QUANT);
        assert!(max_diff(stored_c.data(), free.data()) <= QUANT);
        let bits: Vec<bool> = stored_b.data().iter().map(|&v| v > 0.5).collect();
        assert_eq!(bits, scene.mask.data());
        assert!((e.coverage - scene.mask.coverage()).abs() < 1e-6);
    }
}

#[test]
fn outside_mask_pixels_agree_without_feathering() {
    for seed in 0..20 {
        let scene = sample_scene(48, 48, seed).unwrap();
        let (s, f) = compose_shadow(&scene).unwrap();
        let plane = 48 * 48;
        for c in 0..3 {
            for i in 0..plane {
                if !scene.mask.data()[i] {
                    assert_eq!(s.data()[c * plane + i], f.data()[c * plane + i]);
                }
            }
        }
    }
}

#[test]
fn jitter_flag_perturbs_only_the_target() {
    let params = SceneParams {
        illum_jitter: 0.05,
        ..SceneParams::default()
    };
    let scene = sample_scene_with(32, 32, 3, &params).unwrap();
    let plain = sample_scene(32, 32, 3).unwrap();
    assert_eq!(scene.reflectance, plain.reflectance);
    assert!(scene.illum_free.is_some());
}

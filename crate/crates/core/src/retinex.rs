//! Retinex shadow synthesis: an image is reflectance times illumination, and
//! a shadow swaps the lit illumination for a darker one inside the mask.
//!
//! The generator draws random scenes, composites them and writes ISTD-style
//! triplet folders for training and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::imaging::{save_image, save_mask, ImageTensor, ShadowMask};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor3;

/// Reflectance, illumination fields and mask of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinexScene {
    pub reflectance: Tensor3,
    pub illum_shadow: Tensor3,
    pub illum_nonshadow: Tensor3,
    /// Illumination of the shadow-free target; `None` means `illum_nonshadow`.
    pub illum_free: Option<Tensor3>,
    pub mask: ShadowMask,
}

impl RetinexScene {
    pub fn validate(&self) -> Result<()> {
        let shape = self.reflectance.shape();
        if shape.0 != 3 {
            return Err(shape_err!("reflectance must have 3 channels"));
        }
        let fields = [Some(&self.illum_shadow), Some(&self.illum_nonshadow), self.illum_free.as_ref()];
        for f in fields.into_iter().flatten() {
            if f.shape() != shape {
                return Err(shape_err!(
                    "illumination field {:?} does not match reflectance {:?}",
                    f.shape(),
                    shape
                ));
            }
        }
        if (self.mask.height(), self.mask.width()) != (shape.1, shape.2) {
            return Err(shape_err!(
                "mask {}x{} does not match scene {}x{}",
                self.mask.height(),
                self.mask.width(),
                shape.1,
                shape.2
            ));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.reflectance.height
    }

    pub fn width(&self) -> usize {
        self.reflectance.width
    }
}

/// Composites `(shadow, shadow_free)`:
/// `I_s = M ⊙ L_s ⊙ R + (1 − M) ⊙ L_ns ⊙ R` and `I_sf = L_sf ⊙ R`, both
/// clamped to `[0, 1]`.
pub fn compose_shadow(scene: &RetinexScene) -> Result<(ImageTensor, ImageTensor)> {
    scene.validate()?;
    let (c, h, w) = scene.reflectance.shape();
    let plane = h * w;
    let free = scene.illum_free.as_ref().unwrap_or(&scene.illum_nonshadow);
    let mut shadow = Tensor3::zeros(c, h, w);
    let mut shadow_free = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for i in 0..plane {
            let k = ch * plane + i;
            let r = scene.reflectance.data[k];
            let illum = if scene.mask.data()[i] {
                scene.illum_shadow.data[k]
            } else {
                scene.illum_nonshadow.data[k]
            };
            shadow.data[k] = (illum * r).clamp(0.0, 1.0);
            shadow_free.data[k] = (free.data[k] * r).clamp(0.0, 1.0);
        }
    }
    Ok((ImageTensor::new(shadow)?, ImageTensor::new(shadow_free)?))
}

/// Knobs for [`sample_scene_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// Width in pixels of the soft penumbra inside the mask; 0 = hard edge.
    pub feather_px: usize,
    /// Max relative per-channel deviation of `L_sf` from `L_ns`; 0 = equal.
    pub illum_jitter: f64,
    pub coverage: (f64, f64),
    pub attenuation: (f64, f64),
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            feather_px: 0,
            illum_jitter: 0.0,
            coverage: (0.10, 0.50),
            attenuation: (0.2, 0.7),
        }
    }
}

pub const MIN_SCENE_SIZE: usize = 16;

pub fn sample_scene(height: usize, width: usize, seed: u64) -> Result<RetinexScene> {
    sample_scene_with(height, width, seed, &SceneParams::default())
}

/// Draws a random scene; the result is a pure function of the arguments.
pub fn sample_scene_with(
    height: usize,
    width: usize,
    seed: u64,
    params: &SceneParams,
) -> Result<RetinexScene> {
    if height < MIN_SCENE_SIZE || width < MIN_SCENE_SIZE {
        return Err(arg_err!(
            "scenes must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, got {height}x{width}"
        ));
    }
    let (lo, hi) = params.attenuation;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(arg_err!("attenuation range ({lo}, {hi}) must lie in (0, 1]"));
    }
    let mut rng = rng_from_seed(seed);
    let reflectance = sample_reflectance(&mut rng, height, width);
    let illum_nonshadow = sample_smooth_field(&mut rng, 3, height, width, 3, 0.8, 1.0);
    let mask = sample_mask(&mut rng, height, width, params.coverage);
    let alpha: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi));
    let feather = feather_weights(&mask, params.feather_px);
    let mut illum_shadow = illum_nonshadow.clone();
    let plane = height * width;
    for (c, a) in alpha.iter().enumerate() {
        for i in 0..plane {
            let atten = 1.0 - (1.0 - a) * feather[i];
            illum_shadow.data[c * plane + i] *= atten;
        }
    }
    let illum_free = if params.illum_jitter > 0.0 {
        let j = params.illum_jitter;
        let gain: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-j..=j));
        let mut f = illum_nonshadow.clone();
        for (c, g) in gain.iter().enumerate() {
            for v in f.plane_mut(c) {
                *v = (*v * g).min(1.0);
            }
        }
        Some(f)
    } else {
        None
    };
    Ok(RetinexScene {
        reflectance,
        illum_shadow,
        illum_nonshadow,
        illum_free,
        mask,
    })
}

/// Bilinear upsampling of a random `cells × cells` grid with values in
/// `[lo, hi]`; the result stays in `[lo, hi]`.
fn sample_smooth_field(
    rng: &mut Rng,
    channels: usize,
    height: usize,
    width: usize,
    cells: usize,
    lo: f64,
    hi: f64,
) -> Tensor3 {
    let mut out = Tensor3::zeros(channels, height, width);
    for c in 0..channels {
        let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(lo..=hi)).collect();
        for y in 0..height {
            let gy = y as f64 / (height - 1) as f64 * (cells - 1) as f64;
            let y0 = (gy.floor() as usize).min(cells - 2);
            let fy = gy - y0 as f64;
            for x in 0..width {
                let gx = x as f64 / (width - 1) as f64 * (cells - 1) as f64;
                let x0 = (gx.floor() as usize).min(cells - 2);
                let fx = gx - x0 as f64;
                let g = |yy: usize, xx: usize| grid[yy * cells + xx];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
                let bot = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
                let i = out.idx(c, y, x);
                out.data[i] = (top * (1.0 - fy) + bot * fy).clamp(lo, hi);
            }
        }
    }
    out
}

/// Smooth color field modulated by one geometric texture, plus a few flat
/// colored shapes.
fn sample_reflectance(rng: &mut Rng, height: usize, width: usize) -> Tensor3 {
    let cells = rng.random_range(3..=6);
    let mut r = sample_smooth_field(rng, 3, height, width, cells, 0.2, 0.9);
    let kind = rng.random_range(0..3u32);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(4.0..16.0);
    let depth = rng.random_range(0.1..0.35);
    let (s, c) = theta.sin_cos();
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 * c + y as f64 * s;
            let v = -(x as f64) * s + y as f64 * c;
            let p = match kind {
                0 => 0.5 + 0.5 * (std::f64::consts::TAU * u / period).sin(),
                1 => {
                    let a = (u / period).floor() as i64 + (v / period).floor() as i64;
                    (a.rem_euclid(2)) as f64
                }
                _ => {
                    0.25 * (2.0
                        + (std::f64::consts::TAU * u / period).sin()
                        + (std::f64::consts::TAU * v / (1.7 * period)).sin())
                }
            };
            let m = 1.0 - depth + depth * p;
            for ch in 0..3 {
                let i = r.idx(ch, y, x);
                r.data[i] *= m;
            }
        }
    }
    let n_shapes = rng.random_range(0..=3);
    for _ in 0..n_shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.95));
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(0.05..0.2) * height as f64;
        let rx = rng.random_range(0.05..0.2) * width as f64;
        let rect = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if rect {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                } else {
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    for (ch, col) in color.iter().enumerate() {
                        let i = r.idx(ch, y, x);
                        r.data[i] = *col;
                    }
                }
            }
        }
    }
    for v in &mut r.data {
        *v = v.clamp(0.02, 1.0);
    }
    r
}

enum Blob {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, rot: f64 },
    // Vertices in counter-clockwise order.
    Polygon(Vec<(f64, f64)>),
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Blob::Ellipse { cy, cx, ry, rx, rot } => {
                let (s, c) = rot.sin_cos();
                let dy = y - cy;
                let dx = x - cx;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Blob::Polygon(pts) => {
                let n = pts.len();
                (0..n).all(|i| {
                    let (y0, x0) = pts[i];
                    let (y1, x1) = pts[(i + 1) % n];
                    (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
                })
            }
        }
    }
}

fn sample_blob(rng: &mut Rng, height: usize, width: usize) -> Blob {
    let (h, w) = (height as f64, width as f64);
    let cy = rng.random_range(0.15 * h..0.85 * h);
    let cx = rng.random_range(0.15 * w..0.85 * w);
    let ry = rng.random_range(0.12..0.4) * h;
    let rx = rng.random_range(0.12..0.4) * w;
    if rng.random_bool(0.5) {
        Blob::Ellipse {
            cy,
            cx,
            ry,
            rx,
            rot: rng.random_range(0.0..std::f64::consts::PI),
        }
    } else {
        // Points on an ellipse sorted by angle form a convex polygon.
        let n = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        Blob::Polygon(
            angles
                .into_iter()
                .map(|a| (cy + ry * a.sin(), cx + rx * a.cos()))
                .collect(),
        )
    }
}

const MASK_ATTEMPTS: usize = 200;

fn sample_mask(rng: &mut Rng, height: usize, width: usize, coverage: (f64, f64)) -> ShadowMask {
    for _ in 0..MASK_ATTEMPTS {
        let n = rng.random_range(1..=3);
        let blobs: Vec<Blob> = (0..n).map(|_| sample_blob(rng, height, width)).collect();
        let mask = ShadowMask::from_fn(height, width, |y, x| {
            blobs
                .iter()
                .any(|b| b.contains(y as f64 + 0.5, x as f64 + 0.5))
        });
        let cov = mask.coverage();
        if cov >= coverage.0 && cov <= coverage.1 {
            return mask;
        }
    }
    // Centered rectangle at the middle of the coverage band.
    let target = 0.5 * (coverage.0 + coverage.1);
    let side = target.sqrt();
    let mh = ((height as f64 * side).round() as usize).clamp(1, height);
    let mw = ((target * (height * width) as f64 / mh as f64).round() as usize).clamp(1, width);
    let (y0, x0) = ((height - mh) / 2, (width - mw) / 2);
    ShadowMask::from_fn(height, width, |y, x| {
        y >= y0 && y < y0 + mh && x >= x0 && x < x0 + mw
    })
}

/// Per-pixel shadow strength in `[0, 1]`: 0 outside the mask, ramping to 1
/// over `width` pixels of distance from the nearest lit pixel.
fn feather_weights(mask: &ShadowMask, width: usize) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            if width == 0 {
                out[y * w + x] = 1.0;
                continue;
            }
            let r = width as isize;
            let mut best = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if !mask.get(yy as usize, xx as usize) {
                        best = best.min(((dy * dy + dx * dx) as f64).sqrt());
                    }
                }
            }
            out[y * w + x] = (best / width as f64).min(1.0);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub coverage: f64,
}

/// Seeds and mask coverages of a generated split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{:.6}", e.index, e.seed, e.coverage);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Layout(format!("manifest line {}: '{line}'", n + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                index: parts[0].parse().map_err(|_| bad())?,
                seed: parts[1].parse().map_err(|_| bad())?,
                coverage: parts[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { entries })
    }
}

pub fn manifest_path(out_dir: &Path, split: &str) -> PathBuf {
    out_dir.join(format!("{split}_manifest.txt"))
}

/// File stem used for generated item `index`.
pub fn item_stem(index: usize) -> String {
    format!("{index:05}")
}

/// Writes `n` triplets into `{split}_A` (shadow), `{split}_B` (mask) and
/// `{split}_C` (shadow-free) under `out_dir`. Item `i` uses seed `seed + i`.
pub fn generate_dataset(
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
    out_dir: &Path,
    split: &str,
    params: &SceneParams,
) -> Result<Manifest> {
    let dirs = ["A", "B", "C"].map(|s| out_dir.join(format!("{split}_{s}")));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = Manifest::default();
    for index in 0..n {
        let item_seed = seed.wrapping_add(index as u64);
        let scene = sample_scene_with(height, width, item_seed, params)?;
        let (shadow, shadow_free) = compose_shadow(&scene)?;
        let name = format!("{}.png", item_stem(index));
        save_image(&shadow, &dirs[0].join(&name))?;
        save_mask(&scene.mask, &dirs[1].join(&name))?;
        save_image(&shadow_free, &dirs[2].join(&name))?;
        manifest.entries.push(ManifestEntry {
            index,
            seed: item_seed,
            coverage: scene.mask.coverage(),
        });
    }
    let path = manifest_path(out_dir, split);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_scene(h: usize, w: usize, r: f64, ls: f64, lns: f64, mask: ShadowMask) -> RetinexScene {
        RetinexScene {
            reflectance: Tensor3::filled(3, h, w, r),
            illum_shadow: Tensor3::filled(3, h, w, ls),
            illum_nonshadow: Tensor3::filled(3, h, w, lns),
            illum_free: None,
            mask,
        }
    }

    #[test]
    fn compose_unmasked_scene_is_shadow_free() {
        let scene = uniform_scene(4, 4, 0.5, 0.3, 0.9, ShadowMask::filled(4, 4, false));
        let (s, sf) = compose_shadow(&scene).unwrap();
        assert_eq!(s, sf);
        assert!(s.data().iter().all(|&v| v == 0.9 * 0.5));
    }

    #[test]
    fn compose_equal_illumination_is_shadow_free() {
        let mask = ShadowMask::from_fn(4, 4, |y, x| (x + y) % 3 == 0);
        let scene = uniform_scene(4, 4, 0.7, 0.6, 0.6, mask);
        let (s, sf) = compose_shadow(&scene).unwrap();
        assert_eq!(s, sf);
    }

    #[test]
    fn compose_left_half_example() {
        let mask = ShadowMask::from_fn(4, 6, |_, x| x < 3);
        let scene = uniform_scene(4, 6, 0.5, 0.4, 1.0, mask);
        let (s, sf) = compose_shadow(&scene).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let expected = if x < 3 { 0.2 } else { 0.5 };
                    assert!((s.at(c, y, x) - expected).abs() < 1e-15);
                    assert!((sf.at(c, y, x) - 0.5).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn compose_rejects_mismatched_fields() {
        let mut scene = uniform_scene(4, 4, 0.5, 0.4, 1.0, ShadowMask::filled(4, 4, false));
        scene.illum_shadow = Tensor3::filled(3, 4, 5, 0.4);
        assert!(matches!(compose_shadow(&scene), Err(Error::Shape(_))));
        let scene = uniform_scene(4, 4, 0.5, 0.4, 1.0, ShadowMask::filled(3, 4, false));
        assert!(matches!(compose_shadow(&scene), Err(Error::Shape(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_scene(32, 40, 11).unwrap();
        let b = sample_scene(32, 40, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_scene(32, 40, 12).unwrap());
    }

    #[test]
    fn sampling_rejects_tiny_scenes() {
        assert!(matches!(sample_scene(15, 32, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn sampled_scenes_satisfy_invariants() {
        for seed in 0..40 {
            let scene = sample_scene(32, 32, seed).unwrap();
            let cov = scene.mask.coverage();
            assert!((0.10..=0.50).contains(&cov), "seed {seed}: coverage {cov}");
            for (s, ns) in scene.illum_shadow.data.iter().zip(&scene.illum_nonshadow.data) {
                assert!(s <= ns);
            }
            assert!(scene.illum_nonshadow.data.iter().all(|v| (0.8..=1.0).contains(v)));
            let (s, sf) = compose_shadow(&scene).unwrap();
            let plane = 32 * 32;
            let mut dark = (0.0, 0.0);
            for c in 0..3 {
                for i in 0..plane {
                    let k = c * plane + i;
                    if scene.mask.data()[i] {
                        dark.0 += s.data()[k];
                        dark.1 += sf.data()[k];
                    } else {
                        assert_eq!(s.data()[k], sf.data()[k]);
                    }
                }
            }
            assert!(dark.0 < dark.1, "seed {seed}: shadow region not darker");
        }
    }

    #[test]
    fn feathering_softens_the_border() {
        let params = SceneParams {
            feather_px: 3,
            ..SceneParams::default()
        };
        let hard = sample_scene(48, 48, 5).unwrap();
        let soft = sample_scene_with(48, 48, 5, &params).unwrap();
        assert_eq!(hard.mask, soft.mask);
        let plane = 48 * 48;
        let mut softened = 0;
        for i in 0..plane {
            let (h, s) = (hard.illum_shadow.data[i], soft.illum_shadow.data[i]);
            assert!(s >= h - 1e-15 && s <= soft.illum_nonshadow.data[i]);
            if s > h + 1e-12 {
                softened += 1;
                assert!(hard.mask.data()[i]);
            }
        }
        assert!(softened > 0);
    }

    #[test]
    fn jitter_decouples_free_illumination() {
        let params = SceneParams {
            illum_jitter: 0.05,
            ..SceneParams::default()
        };
        let scene = sample_scene_with(32, 32, 9, &params).unwrap();
        let free = scene.illum_free.as_ref().unwrap();
        assert_ne!(free, &scene.illum_nonshadow);
        for (f, n) in free.data.iter().zip(&scene.illum_nonshadow.data) {
            assert!((f / n - 1.0).abs() <= 0.05 + 1e-12 || *f == 1.0);
        }
    }

    #[test]
    fn manifest_text_roundtrips() {
        let m = Manifest {
            entries: vec![
                ManifestEntry { index: 0, seed: 7, coverage: 0.25 },
                ManifestEntry { index: 1, seed: 8, coverage: 0.125 },
            ],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("1,2").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn compose_is_monotone_in_shadow_illumination(
            seed in 0u64..1000,
            bump in 0.0f64..0.3,
            pick in 0usize..(16 * 16 * 3),
        ) {
            let scene = sample_scene(16, 16, seed).unwrap();
            let mut brighter = scene.clone();
            brighter.illum_shadow.data[pick] =
                (brighter.illum_shadow.data[pick] + bump).min(1.0);
            let (a, _) = compose_shadow(&scene).unwrap();
            let (b, _) = compose_shadow(&brighter).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(y >= x);
            }
        }
    }
}

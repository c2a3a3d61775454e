//! Arbitrary-size inference and attention heatmaps.

use anyhow::{anyhow, bail, Result};
use shadowformer_core::imaging::{ImageTensor, ShadowMask};
use shadowformer_core::{ShadowFormer, Tensor3};

fn mirror(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let j = i % period;
    if j < n {
        j
    } else {
        period - 1 - j
    }
}

fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple) * multiple
}

/// Extends `img` to `height × width` by mirroring at the bottom/right edges.
pub fn pad_image(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let mut out = Tensor3::zeros(img.channels(), height, width);
    for c in 0..img.channels() {
        let plane = out.plane_mut(c);
        for y in 0..height {
            for x in 0..width {
                plane[y * width + x] = img.at(c, mirror(y, h), mirror(x, w));
            }
        }
    }
    Ok(ImageTensor::new(out)?)
}

pub fn pad_mask(mask: &ShadowMask, height: usize, width: usize) -> ShadowMask {
    let (h, w) = (mask.height(), mask.width());
    ShadowMask::from_fn(height, width, |y, x| mask.get(mirror(y, h), mirror(x, w)))
}

/// Pads to the model's size multiple, runs it, and crops back.
pub fn predict_any_size(model: &ShadowFormer, img: &ImageTensor, mask: &ShadowMask) -> Result<ImageTensor> {
    let m = model.config().size_multiple();
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    if (ph, pw) == (h, w) {
        return Ok(model.predict(img, mask)?);
    }
    let out = model.predict(&pad_image(img, ph, pw)?, &pad_mask(mask, ph, pw))?;
    Ok(out.crop(0, 0, h, w)?)
}

/// Attention of the bottleneck token under pixel `(y, x)` over its window,
/// upsampled to the image grid and scaled to `[0, 1]`. Row-major `h × w`.
pub fn attention_heatmap(
    model: &ShadowFormer,
    img: &ImageTensor,
    mask: &ShadowMask,
    point: (usize, usize),
) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let (py, px) = point;
    if py >= h || px >= w {
        bail!("key point ({py}, {px}) lies outside the {h}x{w} image");
    }
    let m = model.config().size_multiple();
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    let (_, cache) = model.forward_train(&pad_image(img, ph, pw)?, &pad_mask(mask, ph, pw))?;
    let attn = cache
        .last_bottleneck_attention()
        .ok_or_else(|| anyhow!("this model has no bottleneck window attention"))?;

    let scale = 1usize << model.config().depth;
    let grid_w = pw / scale;
    let token = (py / scale) * grid_w + px / scale;
    let (window, slot) = attn
        .windows()
        .iter()
        .enumerate()
        .find_map(|(wi, idx)| idx.iter().position(|&t| t == token).map(|s| (wi, s)))
        .ok_or_else(|| anyhow!("bottleneck token {token} is not in any window"))?;
    let tokens = &attn.windows()[window];
    let n = tokens.len();
    let row = &attn.reweighted_attention(window)[slot * n..(slot + 1) * n];

    let mut grid = vec![0.0; (ph / scale) * grid_w];
    for (&t, &a) in tokens.iter().zip(row) {
        grid[t] = a;
    }
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut heat = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = grid[(y / scale) * grid_w + x / scale];
            heat.push(if span > 0.0 { (v - lo) / span } else { 0.0 });
        }
    }
    Ok(heat)
}

/// Blue → cyan → yellow → red ramp for `t ∈ [0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.6, 1.0], [0.5, 1.0, 0.5], [1.0, 0.9, 0.0], [0.6, 0.0, 0.0]];
    let pos = t * (stops.len() - 1) as f64;
    let i = (pos.floor() as usize).min(stops.len() - 2);
    let f = pos - i as f64;
    std::array::from_fn(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

/// Half-and-half blend of `img` with the colorized heatmap; the key point is
/// marked with a small white cross.
pub fn overlay(img: &ImageTensor, heat: &[f64], point: (usize, usize)) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let mut out = Tensor3::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let color = colormap(heat[y * w + x]);
            for (c, cv) in color.iter().enumerate() {
                let base = img.at(c.min(img.channels() - 1), y, x);
                let i = out.idx(c, y, x);
                out.data[i] = 0.5 * base + 0.5 * cv;
            }
        }
    }
    let (py, px) = (point.0 as isize, point.1 as isize);
    for d in -2isize..=2 {
        for (y, x) in [(py + d, px), (py, px + d)] {
            if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                for c in 0..3 {
                    let i = out.idx(c, y as usize, x as usize);
                    out.data[i] = 1.0;
                }
            }
        }
    }
    Ok(ImageTensor::new(out)?)
}

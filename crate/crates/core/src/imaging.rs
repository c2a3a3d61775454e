//! Image and mask containers, PNG/JPEG I/O, resampling and sRGB→CIELAB.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor3;

/// Default threshold used when turning mask images into [`ShadowMask`]s.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// A 1- or 3-channel image with values nominally in `[0, 1]`.
///
/// Network outputs may leave the unit interval; [`ImageTensor::clamped`]
/// restores it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor3,
}

impl ImageTensor {
    pub fn new(tensor: Tensor3) -> Result<Self> {
        if tensor.channels != 1 && tensor.channels != 3 {
            return Err(shape_err!(
                "images have 1 or 3 channels, got {}",
                tensor.channels
            ));
        }
        if tensor.height == 0 || tensor.width == 0 {
            return Err(shape_err!("image has zero extent"));
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("image contains non-finite values".into()));
        }
        Ok(Self { tensor })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor3::filled(channels, height, width, value))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels
    }

    pub fn height(&self) -> usize {
        self.tensor.height
    }

    pub fn width(&self) -> usize {
        self.tensor.width
    }

    pub fn data(&self) -> &[f64] {
        &self.tensor.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.at(c, y, x)
    }

    pub fn clamped(&self) -> ImageTensor {
        let mut t = self.tensor.clone();
        for v in &mut t.data {
            *v = v.clamp(0.0, 1.0);
        }
        ImageTensor { tensor: t }
    }

    /// Rectangular crop `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height() || x0 + w > self.width() || h == 0 || w == 0 {
            return Err(arg_err!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height(),
                self.width()
            ));
        }
        let mut out = Tensor3::zeros(self.channels(), h, w);
        for c in 0..self.channels() {
            for y in 0..h {
                let src = self.tensor.idx(c, y0 + y, x0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + w].copy_from_slice(&self.tensor.data[src..src + w]);
            }
        }
        Ok(ImageTensor { tensor: out })
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ImageTensor {
        let (c, h, w) = self.tensor.shape();
        let mut out = Tensor3::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                let sy = if vertical { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if horizontal { w - 1 - x } else { x };
                    let d = out.idx(ch, y, x);
                    out.data[d] = self.tensor.at(ch, sy, sx);
                }
            }
        }
        ImageTensor { tensor: out }
    }
}

/// Binary shadow mask, `true` marks a shadow pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ShadowMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(shape_err!(
                "mask buffer of {} cannot hold {height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> ShadowMask {
        ShadowMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn matches(&self, img: &ImageTensor) -> bool {
        self.height == img.height() && self.width == img.width()
    }

    /// 1-channel image with 1.0 on shadow pixels.
    pub fn to_image(&self) -> ImageTensor {
        let data = self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        ImageTensor {
            tensor: Tensor3 {
                channels: 1,
                height: self.height,
                width: self.width,
                data,
            },
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ShadowMask> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(arg_err!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        Ok(ShadowMask::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ShadowMask {
        let (h, w) = (self.height, self.width);
        ShadowMask::from_fn(h, w, |y, x| {
            let sy = if vertical { h - 1 - y } else { y };
            let sx = if horizontal { w - 1 - x } else { x };
            self.get(sy, sx)
        })
    }
}

/// Decodes an 8- or 16-bit PNG/JPEG into `[0, 1]` values.
///
/// Grayscale files load as 1-channel images, everything else as RGB.
/// Alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let format = reader.format();
    match format {
        Some(ImageFormat::Png) => {}
        Some(ImageFormat::Jpeg) => {
            log::warn!("{}: JPEG input is lossy", path.display());
        }
        other => {
            return Err(Error::Format {
                path: path.into(),
                message: format!("expected PNG or JPEG, detected {other:?}"),
            })
        }
    }
    let img = reader.decode().map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    Ok(from_dynamic(&img))
}

fn from_dynamic(img: &DynamicImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let channels = if gray { 1 } else { 3 };
    let mut t = Tensor3::zeros(channels, h, w);
    let plane = h * w;
    match (gray, wide) {
        (true, false) => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                t.data[i] = p.0[0] as f64 / 255.0;
            }
        }
        (true, true) => {
            for (i, p) in img.to_luma16().pixels().enumerate() {
                t.data[i] = p.0[0] as f64 / 65535.0;
            }
        }
        (false, false) => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    t.data[c * plane + i] = p.0[c] as f64 / 255.0;
                }
            }
        }
        (false, true) => {
            for (i, p) in img.to_rgb16().pixels().enumerate() {
                for c in 0..3 {
                    t.data[c * plane + i] = p.0[c] as f64 / 65535.0;
                }
            }
        }
    }
    ImageTensor { tensor: t }
}

/// 8-bit quantization used for every written image.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit PNG with `round(v * 255)` clamped to `[0, 255]`.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.tensor.shape();
    let plane = h * w;
    let buf: Vec<u8> = if c == 1 {
        img.tensor.data.iter().map(|&v| quantize_u8(v)).collect()
    } else {
        let mut b = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for ch in 0..3 {
                b.push(quantize_u8(img.tensor.data[ch * plane + i]));
            }
        }
        b
    };
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, color, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.into(),
                message: other.to_string(),
            },
        })
}

pub fn save_mask(mask: &ShadowMask, path: &Path) -> Result<()> {
    save_image(&mask.to_image(), path)
}

/// Shadow where the channel mean exceeds `threshold`.
pub fn binarize_mask(img: &ImageTensor, threshold: f64) -> ShadowMask {
    let (c, h, w) = img.tensor.shape();
    let plane = h * w;
    let data = (0..plane)
        .map(|i| {
            let mean = (0..c).map(|ch| img.tensor.data[ch * plane + i]).sum::<f64>() / c as f64;
            mean > threshold
        })
        .collect();
    ShadowMask {
        height: h,
        width: w,
        data,
    }
}

// D65 reference white, 2° observer.
const WHITE_X: f64 = 0.950_47;
const WHITE_Y: f64 = 1.0;
const WHITE_Z: f64 = 1.088_83;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB triple in `[0, 1]` to CIELAB.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|i| {
        RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2]
    });
    let fx = lab_f(xyz[0] / WHITE_X);
    let fy = lab_f(xyz[1] / WHITE_Y);
    let fz = lab_f(xyz[2] / WHITE_Z);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB (D65) → XYZ → CIELAB, computed in 64-bit.
pub fn srgb_to_lab(img: &ImageTensor) -> Result<Tensor3> {
    if img.channels() != 3 {
        return Err(shape_err!(
            "LAB conversion needs 3 channels, got {}",
            img.channels()
        ));
    }
    let (_, h, w) = img.tensor.shape();
    let plane = h * w;
    let mut out = Tensor3::zeros(3, h, w);
    for i in 0..plane {
        let rgb = std::array::from_fn(|c| img.tensor.data[c * plane + i]);
        let lab = srgb_pixel_to_lab(rgb);
        for c in 0..3 {
            out.data[c * plane + i] = lab[c];
        }
    }
    Ok(out)
}

#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0)
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(arg_err!("resize target must be positive, got {height}x{width}"));
    }
    let (c, h, w) = img.tensor.shape();
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| {
        let s = source_coord(dst, src_len, dst_len);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..height).map(|y| taps(y, h, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| taps(x, w, width)).collect();
    let mut out = Tensor3::zeros(c, height, width);
    for ch in 0..c {
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = img.tensor.at(ch, y0, x0) * (1.0 - fx) + img.tensor.at(ch, y0, x1) * fx;
                let bot = img.tensor.at(ch, y1, x0) * (1.0 - fx) + img.tensor.at(ch, y1, x1) * fx;
                let d = out.idx(ch, y, x);
                out.data[d] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(ImageTensor { tensor: out })
}

/// Nearest-neighbor resize for masks.
pub fn resize_mask_nearest(mask: &ShadowMask, height: usize, width: usize) -> Result<ShadowMask> {
    if height == 0 || width == 0 {
        return Err(arg_err!("resize target must be positive, got {height}x{width}"));
    }
    let (h, w) = (mask.height, mask.width);
    let pick = |dst: usize, src_len: usize, dst_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    Ok(ShadowMask::from_fn(height, width, |y, x| {
        mask.get(pick(y, h, height), pick(x, w, width))
    }))
}

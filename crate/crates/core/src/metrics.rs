//! Region-wise PSNR, SSIM and LAB error over shadow (S), non-shadow (NS)
//! and whole-image (ALL) pixels.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{load_triplet, scan, DatasetSpec};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::imaging::{load_image, resize_bilinear, resize_mask_nearest, srgb_to_lab, ImageTensor, ShadowMask};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Shadow,
    NonShadow,
    All,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];

    pub fn label(self) -> &'static str {
        match self {
            Region::Shadow => "S",
            Region::NonShadow => "NS",
            Region::All => "ALL",
        }
    }

    #[inline]
    pub fn contains(self, shadow: bool) -> bool {
        match self {
            Region::Shadow => shadow,
            Region::NonShadow => !shadow,
            Region::All => true,
        }
    }

    fn index(self) -> usize {
        match self {
            Region::Shadow => 0,
            Region::NonShadow => 1,
            Region::All => 2,
        }
    }
}

/// How the LAB error is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseConvention {
    /// Per pixel, the sum over L, a, b of absolute differences, averaged
    /// over region pixels (what shadow-removal evaluation code reports as RMSE).
    Mae,
    /// Root of the mean squared difference over region elements.
    Rms,
}

impl RmseConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            RmseConvention::Mae => "mae",
            RmseConvention::Rms => "rms",
        }
    }
}

impl FromStr for RmseConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(RmseConvention::Mae),
            "rms" => Ok(RmseConvention::Rms),
            _ => Err(arg_err!("unknown rmse convention `{s}` (expected mae or rms)")),
        }
    }
}

impl fmt::Display for RmseConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_pair(a: &ImageTensor, b: &ImageTensor, mask: &ShadowMask) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(shape_err!("images {:?} and {:?} differ", a.tensor().shape(), b.tensor().shape()));
    }
    if !mask.matches(a) {
        return Err(shape_err!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            a.height(),
            a.width()
        ));
    }
    Ok(())
}

fn empty(region: Region) -> Error {
    Error::Region(format!("{} region has no pixels", region.label()))
}

/// Sum of squared 8-bit-scale differences over region pixels (all
/// channels), and the number of region pixels.
pub fn region_sse(a: &ImageTensor, b: &ImageTensor, mask: &ShadowMask, region: Region) -> Result<(f64, usize)> {
    check_pair(a, b, mask)?;
    let n = mask.data().len();
    let pixels = mask.data().iter().filter(|&&m| region.contains(m)).count();
    let mut sse = 0.0;
    for c in 0..a.channels() {
        let pa = a.tensor().plane(c);
        let pb = b.tensor().plane(c);
        for i in 0..n {
            if region.contains(mask.data()[i]) {
                let d = (pa[i] - pb[i]) * 255.0;
                sse += d * d;
            }
        }
    }
    Ok((sse, pixels))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr_region(a: &ImageTensor, b: &ImageTensor, mask: &ShadowMask, region: Region) -> Result<f64> {
    let (sse, pixels) = region_sse(a, b, mask, region)?;
    if pixels == 0 {
        return Err(empty(region));
    }
    Ok(psnr_from_mse(sse / (pixels * a.channels()) as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur with symmetric borders.
fn blur(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - r, h);
            let srow = &tmp[sy * w..(sy + 1) * w];
            let orow = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                orow[x] += kv * srow[x];
            }
        }
    }
    out
}

/// Full-size SSIM map, averaged over channels, on the 8-bit scale.
pub fn ssim_map(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f64>> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(shape_err!("images {:?} and {:?} differ", a.tensor().shape(), b.tensor().shape()));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(arg_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let k = gaussian_kernel();
    let channels = a.channels();
    let mut map = vec![0.0; h * w];
    for c in 0..channels {
        let x: Vec<f64> = a.tensor().plane(c).iter().map(|v| v * 255.0).collect();
        let y: Vec<f64> = b.tensor().plane(c).iter().map(|v| v * 255.0).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, h, w, &k), blur(&y, h, w, &k));
        let (sxx, syy, sxy) = (blur(&xx, h, w, &k), blur(&yy, h, w, &k), blur(&xy, h, w, &k));
        for i in 0..h * w {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let s = ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            map[i] += s / channels as f64;
        }
    }
    Ok(map)
}

fn masked_mean(values: &[f64], mask: &ShadowMask, region: Region) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, &m) in values.iter().zip(mask.data()) {
        if region.contains(m) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(empty(region));
    }
    Ok(sum / n as f64)
}

pub fn ssim_region(a: &ImageTensor, b: &ImageTensor, mask: &ShadowMask, region: Region) -> Result<f64> {
    check_pair(a, b, mask)?;
    masked_mean(&ssim_map(a, b)?, mask, region)
}

/// Per-pixel LAB error under `convention`, before region averaging.
fn lab_errors(a: &ImageTensor, b: &ImageTensor, convention: RmseConvention) -> Result<Vec<f64>> {
    let la = srgb_to_lab(a)?;
    let lb = srgb_to_lab(b)?;
    let n = la.plane_len();
    let mut out = vec![0.0; n];
    for c in 0..3 {
        let pa = la.plane(c);
        let pb = lb.plane(c);
        for i in 0..n {
            let d = pa[i] - pb[i];
            out[i] += match convention {
                RmseConvention::Mae => d.abs(),
                RmseConvention::Rms => d * d,
            };
        }
    }
    Ok(out)
}

pub fn rmse_lab_region(
    a: &ImageTensor,
    b: &ImageTensor,
    mask: &ShadowMask,
    region: Region,
    convention: RmseConvention,
) -> Result<f64> {
    check_pair(a, b, mask)?;
    let per_pixel = lab_errors(a, b, convention)?;
    let mean = masked_mean(&per_pixel, mask, region)?;
    Ok(match convention {
        RmseConvention::Mae => mean,
        RmseConvention::Rms => (mean / 3.0).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub sse: f64,
    pub pixels: usize,
}

/// Metrics of one image pair; a region with no pixels is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub regions: [Option<RegionMetrics>; 3],
}

impl PairMetrics {
    pub fn get(&self, region: Region) -> Option<&RegionMetrics> {
        self.regions[region.index()].as_ref()
    }
}

/// All three regions for one pair, sharing the SSIM map and LAB conversion.
pub fn evaluate_pair(
    a: &ImageTensor,
    b: &ImageTensor,
    mask: &ShadowMask,
    convention: RmseConvention,
) -> Result<PairMetrics> {
    check_pair(a, b, mask)?;
    let ssim = ssim_map(a, b)?;
    let lab = lab_errors(a, b, convention)?;
    let mut regions = [None; 3];
    for region in Region::ALL {
        let (sse, pixels) = region_sse(a, b, mask, region)?;
        if pixels == 0 {
            continue;
        }
        let lab_mean = masked_mean(&lab, mask, region)?;
        regions[region.index()] = Some(RegionMetrics {
            psnr: psnr_from_mse(sse / (pixels * a.channels()) as f64),
            ssim: masked_mean(&ssim, mask, region)?,
            rmse: match convention {
                RmseConvention::Mae => lab_mean,
                RmseConvention::Rms => (lab_mean / 3.0).sqrt(),
            },
            sse,
            pixels,
        });
    }
    Ok(PairMetrics { regions })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct RegionSums {
    psnr: f64,
    ssim: f64,
    rmse: f64,
    images: usize,
}

/// Running per-region sums of per-image metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    convention: RmseConvention,
    sums: [RegionSums; 3],
}

impl MetricsAccumulator {
    pub fn new(convention: RmseConvention) -> Self {
        Self {
            convention,
            sums: [RegionSums::default(); 3],
        }
    }

    pub fn add(&mut self, pair: &PairMetrics) {
        for (sum, m) in self.sums.iter_mut().zip(&pair.regions) {
            if let Some(m) = m {
                sum.psnr += m.psnr;
                sum.ssim += m.ssim;
                sum.rmse += m.rmse;
                sum.images += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.psnr += b.psnr;
            a.ssim += b.ssim;
            a.rmse += b.rmse;
            a.images += b.images;
        }
    }

    pub fn report(&self) -> MetricsReport {
        let rows = Region::ALL.map(|region| {
            let s = &self.sums[region.index()];
            let n = s.images.max(1) as f64;
            RegionRow {
                region,
                psnr: s.psnr / n,
                ssim: s.ssim / n,
                rmse: s.rmse / n,
                images: s.images,
            }
        });
        MetricsReport {
            convention: self.convention,
            rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionRow {
    pub region: Region,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// Images in which this region was non-empty.
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub convention: RmseConvention,
    pub rows: [RegionRow; 3],
}

impl MetricsReport {
    pub fn row(&self, region: Region) -> &RegionRow {
        &self.rows[region.index()]
    }

    /// Image-count-weighted combination of reports over disjoint sets.
    pub fn combine(&self, other: &MetricsReport) -> Result<MetricsReport> {
        if self.convention != other.convention {
            return Err(arg_err!("cannot combine {} and {} reports", self.convention, other.convention));
        }
        let rows = Region::ALL.map(|region| {
            let (a, b) = (self.row(region), other.row(region));
            let n = a.images + b.images;
            let mix = |x: f64, y: f64| {
                if n == 0 {
                    0.0
                } else {
                    (x * a.images as f64 + y * b.images as f64) / n as f64
                }
            };
            RegionRow {
                region,
                psnr: mix(a.psnr, b.psnr),
                ssim: mix(a.ssim, b.ssim),
                rmse: mix(a.rmse, b.rmse),
                images: n,
            }
        });
        Ok(MetricsReport {
            convention: self.convention,
            rows,
        })
    }

    /// Aligned table, S / NS / ALL column groups, RMSE then PSNR then SSIM.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>10} {:>10} {:>10} {:>8}",
            "region",
            format!("rmse({})", self.convention),
            "psnr",
            "ssim",
            "images"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>10.3} {:>10.3} {:>10.4} {:>8}",
                r.region.label(),
                r.rmse,
                r.psnr,
                r.ssim,
                r.images
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,psnr,ssim,rmse,convention,n_images\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{},{}",
                r.region.label(),
                r.psnr,
                r.ssim,
                r.rmse,
                self.convention,
                r.images
            );
        }
        s
    }
}

/// Evaluation resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Original,
    /// Both result and ground truth are resized to `n × n` (mask with
    /// nearest-neighbour).
    Square(usize),
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Resolution::Original);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Resolution::Square(n)),
            _ => Err(arg_err!("resolution must be `original` or a positive size, got `{s}`")),
        }
    }
}

/// Metrics for one result/ground-truth pair at the given resolution.
pub fn evaluate_resized(
    result: &ImageTensor,
    truth: &ImageTensor,
    mask: &ShadowMask,
    resolution: Resolution,
    convention: RmseConvention,
) -> Result<PairMetrics> {
    match resolution {
        Resolution::Original => evaluate_pair(result, truth, mask, convention),
        Resolution::Square(n) => evaluate_pair(
            &resize_bilinear(result, n, n)?,
            &resize_bilinear(truth, n, n)?,
            &resize_mask_nearest(mask, n, n)?,
            convention,
        ),
    }
}

/// Finds `{stem}.{png,jpg,jpeg}` in `dir`, ignoring case.
pub fn find_result(dir: &Path, stem: &str) -> Option<PathBuf> {
    let entries = std::fs::read_dir(dir).ok()?;
    let mut hits: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            let stem_ok = p
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.eq_ignore_ascii_case(stem));
            let ext_ok = p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()));
            stem_ok && ext_ok
        })
        .collect();
    hits.sort();
    hits.into_iter().next()
}

/// Scores every test triplet of `dataset` against the same-stem image in
/// `results_dir`. Missing results are all listed in one error.
pub fn evaluate_dataset(
    results_dir: &Path,
    dataset: &DatasetSpec,
    convention: RmseConvention,
    resolution: Resolution,
) -> Result<MetricsReport> {
    let records = scan(dataset)?;
    let mut missing = Vec::new();
    let mut found = Vec::with_capacity(records.len());
    for r in &records {
        match find_result(results_dir, &r.id) {
            Some(p) => found.push((r, p)),
            None => missing.push(r.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Layout(format!(
            "{} result(s) missing in {}: {}",
            missing.len(),
            results_dir.display(),
            missing.join(", ")
        )));
    }
    let mut acc = MetricsAccumulator::new(convention);
    for (record, path) in found {
        let t = load_triplet(record)?;
        let result = load_image(&path)?;
        if result.channels() != 3 {
            return Err(shape_err!("{} is not an RGB image", path.display()));
        }
        if (result.height(), result.width()) != (t.target.height(), t.target.width()) {
            return Err(shape_err!(
                "{} is {}x{} but its ground truth is {}x{}",
                path.display(),
                result.height(),
                result.width(),
                t.target.height(),
                t.target.width()
            ));
        }
        acc.add(&evaluate_resized(&result, &t.target, &t.mask, resolution, convention)?);
    }
    Ok(acc.report())
}

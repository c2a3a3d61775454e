//! Triplet discovery for ISTD-style and SRD-style folders, and the seeded
//! crop/flip batch stream used for training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::imaging::{binarize_mask, load_image, resize_mask_nearest, ImageTensor, ShadowMask, DEFAULT_MASK_THRESHOLD};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Istd,
    IstdPlus,
    Srd,
    /// Output of the synthetic generator (ISTD folder names).
    Synthetic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "istd" => Ok(Layout::Istd),
            "istd_plus" | "istd+" => Ok(Layout::IstdPlus),
            "srd" => Ok(Layout::Srd),
            "synthetic" => Ok(Layout::Synthetic),
            _ => Err(arg_err!("unknown layout `{s}` (expected istd, istd_plus, srd or synthetic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: Layout,
    pub split: Split,
    /// SRD only: folder of predicted masks, defaulting to `{root}/{split}/mask`.
    pub mask_dir: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, layout: Layout, split: Split) -> Self {
        Self {
            root: root.into(),
            layout,
            split,
            mask_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRecord {
    pub id: String,
    pub shadow_path: PathBuf,
    pub mask_path: PathBuf,
    pub shadowfree_path: PathBuf,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const FREE_SUFFIXES: [&str; 4] = ["_no_shadow", "_shadow_free", "_free", "_sf"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lower-cased stem → path for every image file directly inside `dir`.
fn index_dir(dir: &Path, strip_suffixes: bool) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let mut key = stem.to_ascii_lowercase();
        if strip_suffixes {
            if let Some(s) = FREE_SUFFIXES.iter().find(|s| key.ends_with(*s)) {
                key.truncate(key.len() - s.len());
            }
        }
        if let Some(prev) = out.insert(key.clone(), path.clone()) {
            return Err(Error::Layout(format!(
                "stem `{key}` is ambiguous: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// First existing subdirectory of `parent` whose name matches one of
/// `names`, compared case-insensitively.
fn find_dir(parent: &Path, names: &[&str]) -> Result<PathBuf> {
    for name in names {
        let direct = parent.join(name);
        if direct.is_dir() {
            return Ok(direct);
        }
    }
    if let Ok(entries) = fs::read_dir(parent) {
        for entry in entries.flatten() {
            let p = entry.path();
            let matches = p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| names.iter().any(|want| n.eq_ignore_ascii_case(want)));
            if matches && p.is_dir() {
                return Ok(p);
            }
        }
    }
    Err(Error::Layout(format!(
        "no `{}` folder under {}",
        names.join("` or `"),
        parent.display()
    )))
}

/// Lists the triplets of a dataset split, sorted by id.
pub fn scan(spec: &DatasetSpec) -> Result<Vec<TripletRecord>> {
    if !spec.root.is_dir() {
        return Err(Error::Layout(format!("dataset root {} does not exist", spec.root.display())));
    }
    let split = spec.split.as_str();
    let (shadow, mask, free, strip) = match spec.layout {
        Layout::Istd | Layout::IstdPlus | Layout::Synthetic => {
            let dir = |s: &str| find_dir(&spec.root, &[&format!("{split}_{s}")]);
            (dir("A")?, dir("B")?, dir("C")?, false)
        }
        Layout::Srd => {
            let base = find_dir(&spec.root, &[split])?;
            let mask = match &spec.mask_dir {
                Some(d) => d.clone(),
                None => find_dir(&base, &["mask", "masks", "shadow_mask"])?,
            };
            let free = find_dir(&base, &["shadow_free", "shadowfree", "free"])?;
            (find_dir(&base, &["shadow"])?, mask, free, true)
        }
    };
    let shadows = index_dir(&shadow, false)?;
    let masks = index_dir(&mask, strip)?;
    let frees = index_dir(&free, strip)?;

    let mut problems = Vec::new();
    let mut records = Vec::new();
    for (id, shadow_path) in &shadows {
        match (masks.get(id), frees.get(id)) {
            (Some(m), Some(f)) => records.push(TripletRecord {
                id: id.clone(),
                shadow_path: shadow_path.clone(),
                mask_path: m.clone(),
                shadowfree_path: f.clone(),
            }),
            (m, f) => {
                let mut missing = Vec::new();
                if m.is_none() {
                    missing.push("mask");
                }
                if f.is_none() {
                    missing.push("shadow-free image");
                }
                problems.push(format!("`{id}`: missing {}", missing.join(" and ")));
            }
        }
    }
    for id in masks.keys().chain(frees.keys()) {
        if !shadows.contains_key(id) {
            problems.push(format!("`{id}`: missing shadow image"));
        }
    }
    problems.sort();
    problems.dedup();
    if !problems.is_empty() {
        return Err(Error::Layout(format!("unmatched stems: {}", problems.join("; "))));
    }
    if records.is_empty() {
        return Err(Error::Layout(format!("no {split} triplets under {}", spec.root.display())));
    }
    Ok(records)
}

/// A decoded `(shadow, mask, shadow-free)` triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub shadow: ImageTensor,
    pub mask: ShadowMask,
    pub target: ImageTensor,
}

/// Decodes a record. Masks whose size differs from the image are resized
/// with nearest-neighbour; images of different sizes are an error.
pub fn load_triplet(record: &TripletRecord) -> Result<Triplet> {
    let shadow = to_rgb(load_image(&record.shadow_path)?);
    let target = to_rgb(load_image(&record.shadowfree_path)?);
    if (shadow.height(), shadow.width()) != (target.height(), target.width()) {
        return Err(Error::Layout(format!(
            "`{}`: shadow image is {}x{} but shadow-free image is {}x{}",
            record.id,
            shadow.height(),
            shadow.width(),
            target.height(),
            target.width()
        )));
    }
    let mut mask = binarize_mask(&load_image(&record.mask_path)?, DEFAULT_MASK_THRESHOLD);
    if !mask.matches(&shadow) {
        mask = resize_mask_nearest(&mask, shadow.height(), shadow.width())?;
    }
    Ok(Triplet {
        id: record.id.clone(),
        shadow,
        mask,
        target,
    })
}

fn to_rgb(img: ImageTensor) -> ImageTensor {
    if img.channels() == 3 {
        return img;
    }
    let t = img.tensor();
    let mut data = Vec::with_capacity(3 * t.data.len());
    for _ in 0..3 {
        data.extend_from_slice(&t.data);
    }
    let tensor = crate::tensor::Tensor3::from_vec(3, t.height, t.width, data).expect("sizes agree");
    ImageTensor::new(tensor).expect("values already valid")
}

/// How a sample was cut from its source triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropInfo {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub triplet: Triplet,
    pub crop: CropInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Square crop side; `None` keeps whole images.
    pub crop: Option<usize>,
    pub seed: u64,
    pub augment_flips: bool,
}

/// Endless, deterministic stream of batches. Each epoch is a fresh seeded
/// permutation of the records; sample `i` of the stream draws its crop
/// and flips from a generator keyed by `i`, so the stream position alone
/// determines everything that follows.
#[derive(Debug, Clone)]
pub struct BatchStream {
    records: Vec<TripletRecord>,
    options: BatchOptions,
    cursor: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

pub fn iterate(records: Vec<TripletRecord>, options: BatchOptions) -> Result<BatchStream> {
    BatchStream::new(records, options)
}

impl BatchStream {
    pub fn new(records: Vec<TripletRecord>, options: BatchOptions) -> Result<Self> {
        if records.is_empty() {
            return Err(arg_err!("cannot iterate an empty dataset"));
        }
        if options.batch_size == 0 {
            return Err(arg_err!("batch size must be positive"));
        }
        if options.crop == Some(0) {
            return Err(arg_err!("crop size must be positive"));
        }
        Ok(Self {
            records,
            options,
            cursor: 0,
            epoch: None,
        })
    }

    /// Number of samples consumed so far.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record_at(&mut self, index: u64) -> usize {
        let n = self.records.len() as u64;
        let epoch = index / n;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.records.len()).collect();
            order.shuffle(&mut rng_from_seed(derive_seed(self.options.seed, &format!("epoch-{epoch}"))));
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().expect("set above").1[(index % n) as usize]
    }

    fn sample(&mut self, index: u64) -> Result<Sample> {
        let ri = self.record_at(index);
        let record = &self.records[ri];
        let full = load_triplet(record)?;
        let mut rng = rng_from_seed(derive_seed(self.options.seed, &format!("sample-{index}")));
        let (h, w) = (full.shadow.height(), full.shadow.width());
        let (ch, cw) = match self.options.crop {
            Some(c) if c > h || c > w => {
                return Err(arg_err!("crop {c} exceeds `{}` ({h}x{w})", record.id));
            }
            Some(c) => (c, c),
            None => (h, w),
        };
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let (fh, fv) = if self.options.augment_flips {
            (rng.random_bool(0.5), rng.random_bool(0.5))
        } else {
            (false, false)
        };
        let crop = CropInfo {
            y0,
            x0,
            height: ch,
            width: cw,
            flip_horizontal: fh,
            flip_vertical: fv,
        };
        Ok(Sample {
            triplet: apply_crop(&full, &crop)?,
            crop,
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<Sample>> {
        let start = self.cursor;
        let batch = (0..self.options.batch_size as u64)
            .map(|i| self.sample(start + i))
            .collect::<Result<Vec<_>>>()?;
        self.cursor = start + self.options.batch_size as u64;
        Ok(batch)
    }
}

impl Iterator for BatchStream {
    type Item = Result<Vec<Sample>>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Cuts the same window from all three members, then flips them together.
pub fn apply_crop(t: &Triplet, crop: &CropInfo) -> Result<Triplet> {
    let cut = |img: &ImageTensor| -> Result<ImageTensor> {
        Ok(img
            .crop(crop.y0, crop.x0, crop.height, crop.width)?
            .flipped(crop.flip_horizontal, crop.flip_vertical))
    };
    Ok(Triplet {
        id: t.id.clone(),
        shadow: cut(&t.shadow)?,
        mask: t
            .mask
            .crop(crop.y0, crop.x0, crop.height, crop.width)?
            .flipped(crop.flip_horizontal, crop.flip_vertical),
        target: cut(&t.target)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_image;

    fn touch(path: &Path, v: f64) {
        save_image(&ImageTensor::filled(3, 4, 4, v).unwrap(), path).unwrap();
    }

    #[test]
    fn layout_names_parse() {
        assert_eq!("ISTD+".parse::<Layout>().unwrap(), Layout::IstdPlus);
        assert_eq!("istd-plus".parse::<Layout>().unwrap(), Layout::IstdPlus);
        assert!("coco".parse::<Layout>().is_err());
    }

    #[test]
    fn srd_stems_match_across_suffixes_and_case() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("test");
        touch(&base.join("shadow/IMG_1.jpg"), 0.2);
        touch(&base.join("shadow_free/img_1_no_shadow.jpg"), 0.5);
        touch(&base.join("mask/IMG_1.png"), 1.0);
        touch(&base.join("shadow/b.png"), 0.2);
        touch(&base.join("shadow_free/B_free.PNG"), 0.5);
        touch(&base.join("mask/b.png"), 0.0);
        let recs = scan(&DatasetSpec::new(dir.path(), Layout::Srd, Split::Test)).unwrap();
        let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["b", "img_1"]);
    }

    #[test]
    fn srd_external_mask_folder_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("train");
        touch(&base.join("shadow/a.png"), 0.2);
        touch(&base.join("shadow_free/a_free.png"), 0.5);
        let masks = dir.path().join("dhan");
        save_image(&ImageTensor::filled(1, 2, 2, 1.0).unwrap(), &masks.join("a.png")).unwrap();
        let mut spec = DatasetSpec::new(dir.path(), Layout::Srd, Split::Train);
        spec.mask_dir = Some(masks);
        let recs = scan(&spec).unwrap();
        let t = load_triplet(&recs[0]).unwrap();
        assert_eq!((t.mask.height(), t.mask.width()), (4, 4));
        assert_eq!(t.mask.count(), 16);
    }

    #[test]
    fn crop_larger_than_image_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["A", "B", "C"] {
            touch(&dir.path().join(format!("train_{s}/x7.png")), 0.5);
        }
        let recs = scan(&DatasetSpec::new(dir.path(), Layout::Istd, Split::Train)).unwrap();
        let mut stream = iterate(
            recs,
            BatchOptions {
                batch_size: 1,
                crop: Some(8),
                seed: 0,
                augment_flips: false,
            },
        )
        .unwrap();
        let err = stream.next_batch().unwrap_err();
        assert!(err.to_string().contains("x7"), "{err}");
    }

    #[test]
    fn empty_record_list_is_rejected() {
        let opts = BatchOptions {
            batch_size: 1,
            crop: None,
            seed: 0,
            augment_flips: false,
        };
        assert!(iterate(Vec::new(), opts).is_err());
    }
}

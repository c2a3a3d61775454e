//! Run settings: preset, then `--config` file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shadowformer_core::datasets::{DatasetSpec, Layout, Split};
use shadowformer_core::metrics::{Resolution, RmseConvention};
use shadowformer_core::{ModelConfig, TrainConfig};

/// Contents of a `--config` file. Every section is optional; unknown keys
/// anywhere are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub layout: Option<String>,
    pub mask_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub resolution: Option<String>,
    pub rmse_mode: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Flag values that override the file; `None` leaves the file/preset value.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub out: Option<PathBuf>,
    pub dataset_root: Option<PathBuf>,
    pub layout: Option<Layout>,
    pub resolution: Option<Resolution>,
    pub rmse_mode: Option<RmseConvention>,
    pub sigma: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub crop_size: Option<usize>,
    pub lr: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(skip)]
    pub dataset_root: Option<PathBuf>,
    #[serde(skip)]
    pub layout: Layout,
    #[serde(skip)]
    pub mask_dir: Option<PathBuf>,
    #[serde(skip)]
    pub resolution: Resolution,
    #[serde(skip)]
    pub rmse_mode: RmseConvention,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// Writes `overrides` on top of the serialized `base` and reads it back, so
/// unknown or mistyped keys fail the same way they would in a full section.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: &toml::Table, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base)?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    T::deserialize(table).map_err(|e| anyhow!("[{section}]: {e}"))
}

impl RunConfig {
    pub fn resolve(file: FileConfig, flags: &Overrides) -> Result<Self> {
        let variant = flags.variant.clone().or(file.variant).unwrap_or_else(|| "toy".into());
        let mut model = overlay(&ModelConfig::preset(&variant)?, &file.model, "model")?;
        if let Some(s) = flags.sigma {
            model.sigma = s;
        }
        model.validate()?;

        let mut train = overlay(&TrainConfig::default(), &file.train, "train")?;
        let seed = flags.seed.or(file.seed).unwrap_or(train.seed);
        train.seed = seed;
        if let Some(n) = flags.steps {
            train.total_steps = n;
        }
        if let Some(n) = flags.batch_size {
            train.batch_size = n;
        }
        if let Some(n) = flags.crop_size {
            train.crop_size = n;
        }
        if let Some(lr) = flags.lr {
            train.lr_init = lr;
        }
        if let Some(n) = flags.checkpoint_every {
            train.checkpoint_every = n;
        }
        train.validate()?;

        let layout = match (flags.layout, &file.data.layout) {
            (Some(l), _) => l,
            (None, Some(s)) => s.parse()?,
            (None, None) => Layout::Synthetic,
        };
        let resolution = match (flags.resolution, &file.eval.resolution) {
            (Some(r), _) => r,
            (None, Some(s)) => s.parse()?,
            (None, None) => Resolution::Original,
        };
        let rmse_mode = match (flags.rmse_mode, &file.eval.rmse_mode) {
            (Some(r), _) => r,
            (None, Some(s)) => s.parse()?,
            (None, None) => RmseConvention::Mae,
        };
        Ok(Self {
            seed,
            variant,
            model,
            train,
            dataset_root: flags.dataset_root.clone().or(file.data.root),
            layout,
            mask_dir: file.data.mask_dir,
            resolution,
            rmse_mode,
            out: flags.out.clone().or(file.out),
        })
    }

    pub fn dataset(&self, split: Split) -> Result<DatasetSpec> {
        let root = self
            .dataset_root
            .clone()
            .ok_or_else(|| anyhow!("no dataset root (pass --dataset-root or set [data] root)"))?;
        let mut spec = DatasetSpec::new(root, self.layout, split);
        spec.mask_dir = self.mask_dir.clone();
        Ok(spec)
    }

    pub fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// The resolved model and optimizer settings as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is plain data")
    }
}

//! Weight and training-state persistence.
//!
//! A checkpoint is a little-endian binary blob (`*.bin`) plus a `key = value`
//! manifest (`*.manifest`) naming the model configuration, parameter count
//! and step. Loading cross-checks all three.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_count, ModelConfig, ShadowFormer};
use crate::nn::Parameterized;

const MAGIC: &[u8; 8] = b"SHFMCKP1";

/// Adam first/second moments and the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub updates: u64,
}

/// Position of the counter-based data stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub cursor: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Vec<f64>,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
    pub stream: Option<StreamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    param_count: usize,
    has_optimizer: bool,
    stream: Option<StreamState>,
    model: ModelConfig,
}

/// `run/model` → (`run/model.bin`, `run/model.manifest`); an existing
/// `.bin` or `.manifest` extension is replaced.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("manifest") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("bin"), with("manifest"))
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("blob is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn from_model(model: &ShadowFormer, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            weights: model.flat_values(),
            step,
            optimizer: None,
            stream: None,
        }
    }

    /// Builds the model described by this checkpoint.
    pub fn to_model(&self) -> Result<ShadowFormer> {
        let mut model = ShadowFormer::new(self.config.clone(), 0)?;
        if model.num_params() != self.weights.len() {
            return Err(Error::Checkpoint(format!(
                "configuration has {} parameters, blob has {}",
                model.num_params(),
                self.weights.len()
            )));
        }
        model.set_flat_values(&self.weights);
        Ok(model)
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.weights.len() + 8));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_f64s(&mut out, &self.weights);
        match &self.optimizer {
            Some(o) => {
                out.extend_from_slice(&o.updates.to_le_bytes());
                put_f64s(&mut out, &o.first_moment);
                put_f64s(&mut out, &o.second_moment);
            }
            None => out.extend_from_slice(&u64::MAX.to_le_bytes()),
        }
        out
    }

    pub fn manifest_text(&self) -> String {
        let manifest = Manifest {
            step: self.step,
            param_count: self.weights.len(),
            has_optimizer: self.optimizer.is_some(),
            stream: self.stream,
            model: self.config.clone(),
        };
        toml::to_string(&manifest).expect("manifest is plain data")
    }

    /// Writes `{path}.bin` and `{path}.manifest`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (bin, manifest) = checkpoint_paths(path);
        if let Some(parent) = bin.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&bin, self.blob()).map_err(|e| Error::io(&bin, e))?;
        fs::write(&manifest, self.manifest_text()).map_err(|e| Error::io(&manifest, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (bin, manifest_path) = checkpoint_paths(path);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        manifest.model.validate()?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint blob", bin.display())));
        }
        let step = r.u64()?;
        let weights = r.f64s()?;
        let updates = r.u64()?;
        let optimizer = if updates == u64::MAX {
            None
        } else {
            Some(OptimizerState {
                updates,
                first_moment: r.f64s()?,
                second_moment: r.f64s()?,
            })
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after blob".into()));
        }
        let expected = param_count(&manifest.model);
        if manifest.param_count != expected || weights.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: configuration {expected}, manifest {}, blob {}",
                manifest.param_count,
                weights.len()
            )));
        }
        if step != manifest.step || optimizer.is_some() != manifest.has_optimizer {
            return Err(Error::Checkpoint("manifest and blob disagree".into()));
        }
        if let Some(o) = &optimizer {
            if o.first_moment.len() != expected || o.second_moment.len() != expected {
                return Err(Error::Checkpoint("optimizer moments have the wrong size".into()));
            }
        }
        Ok(Self {
            config: manifest.model,
            weights,
            step,
            optimizer,
            stream: manifest.stream,
        })
    }

    /// Loads and additionally requires the stored configuration to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: checkpoint has {:?}, expected {:?}",
                ck.config, expected
            )));
        }
        Ok(ck)
    }
}

//! Run configuration and checkpoints.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::optim::OptimConfig;
use crate::params::ParamStore;
use crate::real::Real;

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "MIRRORNET_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub crf: CrfParams,
    pub data: DataConfig,
    pub run: RunSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of image/mask pairs; synthetic scenes are used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<PathBuf>,
    pub synthetic_scenes: usize,
    /// Random horizontal flips during training.
    pub augment: bool,
    /// Held-out fraction when a single directory is split by group.
    pub test_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            test_dir: None,
            synthetic_scenes: 20,
            augment: true,
            test_fraction: 955.0 / 4018.0,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Append-only training log.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    pub threshold: f64,
    /// Measure train-set IoU every this many epochs; 0 disables it.
    pub eval_every: usize,
    /// Stop once train-set IoU reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_iou: Option<f64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            seed: 0,
            checkpoint: None,
            log: None,
            threshold: 0.5,
            eval_every: 1,
            stop_at_iou: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optim.validate()?;
        self.crf.validate()?;
        self.data.synth.validate(self.network.resolution)?;
        if self.data.synthetic_scenes == 0 {
            return Err(Error::Config("synthetic_scenes must be positive".into()));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if !(self.run.threshold > 0.0 && self.run.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.run.threshold)));
        }
        if let Some(t) = self.run.stop_at_iou {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("stop_at_iou must be in (0, 1], got {t}")));
            }
            if self.run.eval_every == 0 {
                return Err(Error::Config("stop_at_iou needs eval_every > 0".into()));
            }
        }
        Ok(())
    }
}

/// Seed precedence: explicit flag, then the environment, then the config.
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(config_seed),
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MNC1";

/// Trained parameters with the configuration that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    /// Layout: magic, `u32` length of the TOML config, the config, then the
    /// parameter store.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let text = self.config.to_toml();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        self.store.write_to(w)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "checkpoint",
            message,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(bad(format!("implausible config length {len}")));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| bad("config is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let store = ParamStore::read_from(r)?;
        Ok(Checkpoint { config, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(std::fs::write(path, buf)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

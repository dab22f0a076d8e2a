//! Whole-pipeline configuration: one versioned JSON document covering every
//! stage, validated against each module's preconditions and hashed for
//! traceability.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::BenchParams;
use crate::dataset::DatasetParams;
use crate::detect::DetectionConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::neural::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub config_version: u32,
    /// Master seed. Stage seeds below are derived from it by name whenever
    /// it is set through `new` or `reseed`; a loaded file keeps whatever
    /// stage seeds it carries.
    pub seed: u64,
    pub dataset: DatasetParams,
    pub train: TrainConfig,
    pub detection: DetectionConfig,
    pub bench: BenchParams,
}

impl Default for Config {
    fn default() -> Self {
        Config::new(1)
    }
}

/// Named substream: the stage seed is the leading eight bytes of
/// SHA-256(master_le || name).
fn stage_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest holds eight bytes"))
}

impl Config {
    pub fn new(seed: u64) -> Self {
        let mut config = Config {
            config_version: CONFIG_VERSION,
            seed,
            dataset: DatasetParams::default(),
            train: TrainConfig::default(),
            detection: DetectionConfig::default(),
            bench: BenchParams::default(),
        };
        config.reseed(seed);
        config
    }

    /// Set the master seed and rederive every stage seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = stage_seed(seed, "dataset");
        self.dataset.pool_seed = stage_seed(seed, "pool");
        self.train.seed = stage_seed(seed, "train");
        self.bench.seed = stage_seed(seed, "bench");
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config_version {}, expected {CONFIG_VERSION}",
                self.config_version
            )));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.detection.validate()?;
        self.bench.validate()?;
        for (name, n) in [("dataset.grid_n", self.dataset.grid_n), ("bench.grid_n", self.bench.grid_n)] {
            // Three stride-2 encoders followed by three 2x upsamples only
            // reproduce the input resolution when it divides by 8.
            if n == 0 || n % 8 != 0 {
                return Err(Error::invalid(format!(
                    "{name} must be a positive multiple of 8, got {n}"
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON encoding; field order is fixed by
    /// the struct declarations, so equal configs hash equally.
    pub fn canonical_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("config: {e}")))?;
        text.push('\n');
        fsutil::atomic_write_bytes(path, text.as_bytes())
    }
}

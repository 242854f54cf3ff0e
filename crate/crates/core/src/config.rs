//! Run configuration: one TOML document with a table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beamforming::BeamConfig;
use crate::channel::Scenario;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::omp::Stage1Config;
use crate::priors::{SpatialPriorParams, TemporalPriorParams};
use crate::spvbi::SpvbiConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsConfig {
    pub spatial: SpatialPriorParams,
    pub temporal: TemporalPriorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Base seed; trial `i` uses a seed derived from `(seed, i)`.
    pub seed: u64,
    pub trials: usize,
    pub snr_db: Vec<f64>,
    /// Tracking-phase pilot counts.
    pub pilots: Vec<usize>,
    /// Frames per track run, the estimation frame included.
    pub frames: usize,
    /// Track DFO and off-grid parameters in the tracking frames.
    pub track_nonideal: bool,
    pub output_dir: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 10,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            pilots: vec![4, 6, 8],
            frames: 10,
            track_nonideal: true,
            output_dir: "results".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub grids: GridConfig,
    pub priors: PriorsConfig,
    pub stage1: Stage1Config,
    pub stage2: SpvbiConfig,
    pub beamforming: BeamConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.priors.spatial.validate()?;
        self.priors.temporal.validate()?;
        if self.sweep.frames == 0 || self.sweep.trials == 0 {
            return Err(Error::Config("sweep needs at least one frame and one trial".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

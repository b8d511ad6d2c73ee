//! The JSON run configuration. Every section is optional and defaults to the
//! library defaults; command-line flags are applied on top.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rotfeat::eval::{ExtractParams, MmaConfig, VprConfig};
use rotfeat::geometry::RansacParams;
use rotfeat::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Checkpoint read by inference commands.
    pub model: Option<PathBuf>,
    /// HPatches root (eval-mma) or VPR root (eval-vpr).
    pub dataset: Option<PathBuf>,
    /// Primary output file.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub keep_fraction: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { keep_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VprSection {
    /// Retrievals within this many place indices count as correct.
    pub tolerance: usize,
}

impl Default for VprSection {
    fn default() -> Self {
        Self { tolerance: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivarianceSection {
    pub size: usize,
    pub trials: usize,
    pub border: usize,
    /// Band-limited inputs instead of uniform noise.
    pub smooth: bool,
}

impl Default for EquivarianceSection {
    fn default() -> Self {
        Self {
            size: 32,
            trials: 4,
            border: 0,
            smooth: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// When set, replaces every seed below (training, RANSAC, probes).
    pub seed: Option<u64>,
    /// Expected group order of a loaded checkpoint.
    pub group_order: Option<usize>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: Option<String>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub extract: ExtractParams,
    pub ransac: RansacParams,
    pub ensemble: EnsembleSection,
    pub mma: MmaConfig,
    pub vpr: VprSection,
    pub equivariance: EquivarianceSection,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }

    /// Propagates the global seed into every section.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.ransac.seed = seed;
            self.mma.ransac.seed = seed;
        }
    }

    pub fn probe_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn vpr_config(&self) -> VprConfig {
        VprConfig {
            extract: self.extract.clone(),
            ransac: self.ransac.clone(),
        }
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.paths
            .model
            .as_deref()
            .ok_or_else(|| UsageError("a model checkpoint is required (--model)".into()))
            .context("resolving the model path")
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.paths
            .dataset
            .as_deref()
            .ok_or_else(|| UsageError("a dataset directory is required (--dataset)".into()))
            .context("resolving the dataset path")
    }

    pub fn output_path(&self) -> Result<&Path> {
        self.paths
            .output
            .as_deref()
            .ok_or_else(|| UsageError("an output path is required (--out)".into()))
            .context("resolving the output path")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let usage = |e: rotfeat::Error| UsageError(e.to_string());
        self.train.validate().map_err(usage)?;
        self.mma.validate().map_err(usage)?;
        if self.extract.max_keypoints == 0 || self.extract.nms_radius == 0 {
            return Err(UsageError("max_keypoints and nms_radius must be >= 1".into()).into());
        }
        let r = &self.ransac;
        if !(r.threshold_px > 0.0)
            || r.max_iters == 0
            || !(r.confidence > 0.0 && r.confidence < 1.0)
        {
            return Err(UsageError(
                "ransac needs threshold_px > 0, max_iters >= 1 and confidence in (0, 1)".into(),
            )
            .into());
        }
        let k = self.ensemble.keep_fraction;
        if !(k > 0.0 && k <= 1.0) {
            return Err(UsageError(format!("keep_fraction must be in (0, 1], got {k}")).into());
        }
        let eq = &self.equivariance;
        if eq.size == 0 || eq.trials == 0 {
            return Err(UsageError("equivariance size and trials must be >= 1".into()).into());
        }
        if let Some(level) = &self.log_level {
            level
                .parse::<log::LevelFilter>()
                .map_err(|_| UsageError(format!("unknown log level {level:?}")))?;
        }
        Ok(())
    }
}

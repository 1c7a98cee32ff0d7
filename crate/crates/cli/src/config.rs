//! Run configuration: one strict JSON document covering every stage.

use std::path::{Path, PathBuf};

use phenokit_core::model::PhenoNetConfig;
use phenokit_core::train::TrainConfig;
use phenokit_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default weight of the control mean subtracted by PCs.
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcsConfig {
    pub alpha: f64,
}

impl Default for PcsConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpheringConfig {
    /// Ridge added to the control covariance; `null` derives it from the trace.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory holding `index.csv`, `latents.csv` and images.
    pub data: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Fraction of each ranked list counted as the top connections for FoE.
    pub top_frac: f64,
    /// Scale the 2-D IMAD embedding axes to unit variance.
    pub imad_whiten: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { top_frac: phenokit_core::eval::DEFAULT_TOP_FRAC, imad_whiten: true }
    }
}

/// Every tunable of a pipeline run. Unknown keys are rejected; missing keys
/// take the documented defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: PhenoNetConfig,
    pub train: TrainConfig,
    pub pcs: PcsConfig,
    pub sphering: SpheringConfig,
    pub paths: PathsConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Input { path: path.into(), detail: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Input { path: path.into(), detail: e.to_string() })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.pcs.alpha) {
            return Err(Error::InvalidArgument(format!("pcs.alpha must lie in [0,1], got {}", self.pcs.alpha)));
        }
        if let Some(e) = self.sphering.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::InvalidArgument(format!("sphering.epsilon must be finite and >= 0, got {e}")));
            }
        }
        if !(self.metrics.top_frac > 0.0 && self.metrics.top_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "metrics.top_frac must lie in (0,1], got {}",
                self.metrics.top_frac
            )));
        }
        Ok(())
    }
}

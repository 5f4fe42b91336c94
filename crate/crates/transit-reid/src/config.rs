//! TOML run configuration.
//!
//! Every section is optional and every missing key keeps its default, so a
//! file only needs the values it changes. Command-line flags are applied on
//! top by the caller.
//!
//! ```toml
//! [engine]
//! sigma = 0.12
//! distance = "cosine"
//!
//! [engine.score_weights]
//! ssim = 0.2
//! hist = 0.6
//! mse = 0.2
//!
//! [route]
//! num_stops = 10
//! noise_sigma = 0.16
//!
//! [rois]
//! door = [0, 0, 120, 240]
//! inside = [100, 0, 640, 480]
//!
//! [pipeline]
//! capacity = 64
//! budget_secs = 30.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use transit_reid_core::behavior::{Roi, RoiKind};
use transit_reid_core::sim::RouteSpec;
use transit_reid_core::EngineConfig;

use crate::error::{AppError, Result};

/// Door and inside regions as `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub door: [f64; 4],
    pub inside: [f64; 4],
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            door: [0.0, 0.0, 120.0, 240.0],
            inside: [100.0, 0.0, 640.0, 480.0],
        }
    }
}

impl RoiConfig {
    pub fn rois(&self) -> Result<(Roi, Roi)> {
        let [a, b, c, d] = self.door;
        let door = Roi::new(a, b, c, d, RoiKind::Door)?;
        let [a, b, c, d] = self.inside;
        let inside = Roi::new(a, b, c, d, RoiKind::Inside)?;
        Ok((door, inside))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Capacity of every inter-stage channel.
    pub capacity: usize,
    /// Per-stop processing budget in seconds.
    pub budget_secs: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            capacity: 64,
            budget_secs: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub route: RouteSpec,
    pub rois: RoiConfig,
    pub pipeline: PipelineSettings,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppError::format(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Defaults, or the file's values when a path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vindex::Metric;

/// Weights of the SSIM, histogram and MSE terms of the grading score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub ssim: f64,
    pub hist: f64,
    pub mse: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            hist: 0.6,
            mse: 0.2,
        }
    }
}

/// Tunables of the grading, aggregation and matching stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Match-confidence threshold; a confidence strictly above it is a hot match.
    pub sigma: f64,
    /// Number of candidates retrieved per query.
    pub top_k: usize,
    /// Steepness of the logarithmic score mapping.
    pub log_k: f64,
    /// Lower bound of the raw score fed to the logarithmic mapping.
    pub log_min: f64,
    /// Upper bound of the raw score fed to the logarithmic mapping.
    pub log_max: f64,
    pub score_weights: ScoreWeights,
    /// Frames scoring at or below this are dropped from aggregation.
    pub sqfa_threshold: f64,
    pub tracklet_len: usize,
    pub distance: Metric,
    /// Per-part embedding dimension.
    pub d_part: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            sigma: 0.12,
            top_k: 5,
            log_k: 20.0,
            log_min: 0.0,
            log_max: 1.0,
            score_weights: ScoreWeights::default(),
            sqfa_threshold: 0.3,
            tracklet_len: 8,
            distance: Metric::L2,
            d_part: 256,
        }
    }
}

impl EngineConfig {
    pub fn validate(self) -> Result<Self> {
        fn bad(field: &'static str, reason: &'static str) -> Error {
            Error::InvalidConfig { field, reason }
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(bad("sigma", "must lie in (0, 1)"));
        }
        if self.top_k < 2 {
            return Err(bad("top_k", "must be at least 2"));
        }
        if !(self.log_k > 0.0 && self.log_k.is_finite()) {
            return Err(bad("log_k", "must be positive"));
        }
        if !(self.log_min.is_finite() && self.log_max.is_finite() && self.log_min < self.log_max) {
            return Err(bad("log_min", "must be finite and below log_max"));
        }
        let w = self.score_weights;
        for (name, v) in [("score_weights", w.ssim), ("score_weights", w.hist), ("score_weights", w.mse)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(name, "weights must be finite and non-negative"));
            }
        }
        if !(self.sqfa_threshold >= 0.0 && self.sqfa_threshold < 1.0) {
            return Err(bad("sqfa_threshold", "must lie in [0, 1)"));
        }
        if self.tracklet_len == 0 {
            return Err(bad("tracklet_len", "must be at least 1"));
        }
        if self.d_part == 0 {
            return Err(bad("d_part", "must be at least 1"));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.sigma, 0.12);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.log_k, 20.0);
        assert_eq!(cfg.score_weights, ScoreWeights { ssim: 0.2, hist: 0.6, mse: 0.2 });
        assert_eq!(cfg.clone().validate(), Ok(cfg));
    }

    #[test]
    fn rejects_boundary_values() {
        let field = |cfg: EngineConfig| match cfg.validate() {
            Err(Error::InvalidConfig { field, .. }) => field,
            other => panic!("expected InvalidConfig, got {other:?}"),
        };
        assert_eq!(field(EngineConfig { sigma: 0.0, ..Default::default() }), "sigma");
        assert_eq!(field(EngineConfig { sigma: 1.0, ..Default::default() }), "sigma");
        assert_eq!(field(EngineConfig { top_k: 1, ..Default::default() }), "top_k");
        assert_eq!(field(EngineConfig { sqfa_threshold: 1.0, ..Default::default() }), "sqfa_threshold");
        assert_eq!(
            field(EngineConfig {
                score_weights: ScoreWeights { ssim: -0.1, hist: 0.6, mse: 0.2 },
                ..Default::default()
            }),
            "score_weights"
        );
        assert_eq!(field(EngineConfig { log_k: 0.0, ..Default::default() }), "log_k");
    }

    #[test]
    fn weights_need_not_sum_to_one() {
        let cfg = EngineConfig {
            score_weights: ScoreWeights { ssim: 1.0, hist: 1.0, mse: 1.0 },
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }
}

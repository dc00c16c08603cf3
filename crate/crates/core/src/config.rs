//! Run configuration, read from JSON. Every key is optional; unknown keys
//! are rejected.

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, DEFAULT_DDIM_STEPS, DEFAULT_TIMESTEPS};
use crate::error::{Error, Result};
use crate::spatial::SpatialUnetConfig;
use crate::stu::DEFAULT_LAMBDA;
use crate::temporal::TemporalUnetConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StuConfig {
    pub lambda: f64,
    /// Also fuse at the upsampling stages, not only the down stages and
    /// the bottleneck.
    pub fuse_up_stages: bool,
}

impl Default for StuConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            fuse_up_stages: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "S")]
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            ddim_steps: DEFAULT_DDIM_STEPS,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.timesteps, self.ddim_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcveConfig {
    pub spatial: SpatialUnetConfig,
    pub temporal: TemporalUnetConfig,
    pub stu: StuConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
}

impl TcveConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        self.temporal.validate()?;
        self.train.validate()?;
        if !(self.stu.lambda >= 0.0 && self.stu.lambda.is_finite()) {
            return Err(Error::Config(format!("stu.lambda must be finite and nonnegative, got {}", self.stu.lambda)));
        }
        self.schedule.build().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg = TcveConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TcveConfig::default());
        assert_eq!(cfg.train.learning_rate, 3e-5);
        assert_eq!(cfg.train.iterations, 100);
        assert_eq!(cfg.schedule.ddim_steps, 50);
        assert_eq!(cfg.stu.lambda, 0.1);
    }

    #[test]
    fn partial_override() {
        let cfg = TcveConfig::from_json(r#"{"stu": {"lambda": 0.0}, "schedule": {"T": 100}}"#).unwrap();
        assert_eq!(cfg.stu.lambda, 0.0);
        assert!(cfg.stu.fuse_up_stages);
        assert_eq!(cfg.schedule.timesteps, 100);
        assert_eq!(cfg.schedule.ddim_steps, 50);
    }

    #[test]
    fn unknown_key_named() {
        let err = TcveConfig::from_json(r#"{"stu": {"lamda": 0.2}}"#).unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
        let err = TcveConfig::from_json(r#"{"optimizer": {}}"#).unwrap_err().to_string();
        assert!(err.contains("optimizer"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TcveConfig::from_json(r#"{"schedule": {"T": 10, "S": 20}}"#).is_err());
        assert!(TcveConfig::from_json(r#"{"train": {"learning_rate": 0}}"#).is_err());
        assert!(TcveConfig::from_json(r#"{"stu": {"lambda": -1}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = TcveConfig::default();
        cfg.train.ablation.apply_flag("no-ta").unwrap();
        assert_eq!(TcveConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::env::{Disturbance, EnvConfig, Timing};
use crate::agent::{AgentConfig, DivergenceGuard};
use crate::control::{ControllerConfig, GainSet};
use crate::dynamics::QuadrotorParams;
use crate::trajectory::TrajectoryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    /// Scale `a` of the gain update `k (1 + a n)`.
    pub search_rate: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self { search_rate: 0.4 }
    }
}

/// Default output locations, used when the command line does not name one.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
}

/// Everything needed to reproduce a run. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds network initialization, exploration and disturbance noise.
    pub seed: u64,
    pub vehicle: QuadrotorParams,
    pub gains: GainSet,
    pub trajectory: TrajectoryConfig,
    pub controller: ControllerConfig,
    pub timing: Timing,
    pub tuning: TuningConfig,
    pub guard: DivergenceGuard,
    pub disturbance: Disturbance,
    pub agent: AgentConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |e: String| HarnessError::Config(e);
        self.vehicle.validate().map_err(|e| cfg(e.to_string()))?;
        self.gains.validate().map_err(|e| cfg(e.to_string()))?;
        self.trajectory.validate().map_err(|e| cfg(e.to_string()))?;
        self.timing.validate().map_err(cfg)?;
        self.agent.validate().map_err(|e| cfg(e.to_string()))?;
        let c = &self.controller;
        if !(c.derivative_tau >= 0.0 && c.tilt_limit > 0.0 && c.tilt_guard > 0.0 && c.degenerate_threshold >= 0.0) {
            return Err(cfg("controller settings must be non-negative with positive tilt limits".into()));
        }
        if !(self.tuning.search_rate > 0.0 && self.tuning.search_rate < 1.0) {
            return Err(cfg(format!("search_rate must lie in (0, 1), got {}", self.tuning.search_rate)));
        }
        if !(self.guard.max_attitude_error > 0.0 && self.guard.max_position_error > 0.0) {
            return Err(cfg("guard thresholds must be positive".into()));
        }
        let d = &self.disturbance;
        if !(d.moment_noise_std >= 0.0 && d.thrust_noise_std >= 0.0 && d.moment_bias.iter().all(|b| b.is_finite())) {
            return Err(cfg("disturbance settings must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            params: self.vehicle.clone(),
            gains: self.gains,
            trajectory: self.trajectory.clone(),
            controller: ControllerConfig { dt: self.timing.dt_ctrl, ..self.controller },
            timing: self.timing,
            search_rate: self.tuning.search_rate,
            guard: self.guard,
            disturbance: self.disturbance,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config beside `output` as `<stem>.config.toml`.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf, HarnessError> {
        let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let path = output.with_file_name(format!("{stem}.config.toml"));
        fs::write(&path, self.to_toml_string())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.env_config(), EnvConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.gains.inner.kp1_phitheta = 4.5;
        cfg.disturbance.moment_bias = [1e-3, 0.0, -2e-3];
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_and_errors() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[trajectory]\nradius = 2.0\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.trajectory.radius, 2.0);
        assert_eq!(cfg.trajectory.altitude, 5.0);

        for bad in [
            "[timing]\ndt_ctrl = 0.004\n",
            "[trajectory]\nradius = -1.0\n",
            "[vehicle]\nmass = 0.0\n",
            "[agent]\ngamma = 2.0\n",
            "[gains.inner]\nkp1_phitheta = -4.0\n",
            "unknown_key = 1\n",
            "[agent]\ntarget = { kind = \"sideways\", value = 1.0 }\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(bad), Err(HarnessError::Config(_))), "{bad}");
        }
        let cfg = RunConfig::from_toml_str("[agent]\ntarget = { kind = \"absolute\", value = 117.0 }\n").unwrap();
        assert_eq!(cfg.agent.target, crate::agent::ddpg::TrainingTarget::Absolute(117.0));
    }
}

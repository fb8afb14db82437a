//! Experiment driver: configuration, simulation runs, metrics and the
//! trace files they produce.

pub mod config;
pub mod metrics;
pub mod trace;

use thiserror::Error;

use crate::agent::env::{run_policy_episode, Policy, ZeroPolicy};
use crate::agent::AgentError;
use crate::neural::{DenseNet, NeuralError, PolicyFile};

pub use config::RunConfig;
pub use metrics::{compare, largest_peaks, metrics, rmse_attitude, Comparison, MetricsReport};
pub use trace::{SimTrace, TraceRecord, TRACE_COLUMNS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("trace has no records")]
    EmptyTrace,
    #[error("traces cover different missions: {0}")]
    MissionMismatch(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("policy: {0}")]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 1 usage, 2 configuration, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Where the inner-loop gains come from during a run.
#[derive(Debug, Clone, Copy)]
pub enum GainSource<'a> {
    /// The configured gains, unmodulated.
    Manual,
    /// An exported policy, evaluated from its raw matrices.
    Policy(&'a PolicyFile),
    /// An in-memory actor network.
    Agent(&'a DenseNet),
}

/// Runs the full mission. A simulation fault ends the trace early and is
/// recorded in [`SimTrace::fault`].
pub fn simulate(cfg: &RunConfig, source: GainSource<'_>) -> Result<SimTrace, HarnessError> {
    cfg.validate()?;
    let mut policy: Box<dyn Policy + '_> = match source {
        GainSource::Manual => Box::new(ZeroPolicy),
        GainSource::Policy(file) => {
            if file.obs_dim != crate::agent::OBS_DIM || file.act_dim != crate::agent::ACT_DIM {
                return Err(NeuralError::DimensionMismatch(format!(
                    "policy maps {} -> {}, the tuner needs {} -> {}",
                    file.obs_dim,
                    file.act_dim,
                    crate::agent::OBS_DIM,
                    crate::agent::ACT_DIM
                ))
                .into());
            }
            Box::new(file.clone())
        }
        GainSource::Agent(net) => {
            if net.input_dim() != crate::agent::OBS_DIM || net.output_dim() != crate::agent::ACT_DIM {
                return Err(NeuralError::DimensionMismatch("actor has the wrong shape".into()).into());
            }
            Box::new(net.clone())
        }
    };
    let log = run_policy_episode(&cfg.env_config(), policy.as_mut(), cfg.seed).map_err(HarnessError::Simulation)?;
    Ok(log.trace)
}

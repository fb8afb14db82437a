//! Gain-tuning agent: observation and action spaces, reward shaping, the
//! mission environment and the DDPG learner.

pub mod ddpg;
pub mod env;
pub mod replay;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{AttitudeSetpoint, InnerGains};
use crate::dynamics::RigidBodyState;
use crate::neural::NeuralError;
use crate::trajectory::ReferencePoint;

pub use ddpg::{AgentConfig, DdpgAgent, EvalRecord, ExplorationConfig, TrainOutcome, TrainingCurve};
pub use env::{EnvConfig, EpisodeLog, TuningEnv};
pub use replay::{ReplayBuffer, Transition};

pub const OBS_DIM: usize = 12;
pub const ACT_DIM: usize = 5;

/// Reward levels from the largest attitude error band down to the smallest.
pub const REWARD_LEVELS: [f64; 6] = [-25.0, -15.0, -10.0, -5.0, -1.0, 10.0];

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("replay buffer holds {available} transitions, {requested} requested")]
    InsufficientExperience { available: usize, requested: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("environment: {0}")]
    Environment(String),
}

/// `[p, η, e_p, e_η]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[0..3])
    }

    pub fn attitude(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[3..6])
    }

    pub fn position_error(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[6..9])
    }

    pub fn attitude_error(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[9..12])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Normalized gain modulations `[n_P1_φθ, n_P1_ψ, n_P2_φθ, n_P2_ψ, n_D_φθ]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action(pub [f64; ACT_DIM]);

impl Action {
    pub fn zero() -> Self {
        Self([0.0; ACT_DIM])
    }

    pub fn clamped(mut self) -> Self {
        for n in &mut self.0 {
            *n = n.clamp(-1.0, 1.0);
        }
        self
    }
}

pub fn observe(s: &RigidBodyState, reference: &ReferencePoint, sp: &AttitudeSetpoint) -> Observation {
    let e_p = reference.position - s.position;
    let e_eta = sp.error(&s.attitude);
    let mut o = [0.0; OBS_DIM];
    o[0..3].copy_from_slice(s.position.as_slice());
    o[3..6].copy_from_slice(s.attitude.as_slice());
    o[6..9].copy_from_slice(e_p.as_slice());
    o[9..12].copy_from_slice(e_eta.as_slice());
    Observation(o)
}

/// `k_new = k_base (1 + a·n)` for each of the five inner gains.
pub fn apply_action(a: &Action, base: &InnerGains, search_rate: f64) -> InnerGains {
    let k = base.to_array();
    InnerGains::from_array(std::array::from_fn(|i| k[i] * (1.0 + search_rate * a.0[i])))
}

/// Piecewise-constant reward on the attitude error norm [rad].
pub fn reward(e_eta_norm: f64) -> f64 {
    let band = reward_band(e_eta_norm);
    REWARD_LEVELS[band]
}

/// Index into [`REWARD_LEVELS`] for an attitude error norm.
pub fn reward_band(e: f64) -> usize {
    if !(e < 0.04) {
        0
    } else if e >= 0.01 {
        1
    } else if e >= 0.001 {
        2
    } else if e >= 0.0005 {
        3
    } else if e > 0.0001 {
        4
    } else {
        5
    }
}

/// Episode return implied by a histogram of steps per reward band.
pub fn episode_return_from_counts(counts: &[u64; 6]) -> f64 {
    counts.iter().zip(REWARD_LEVELS).map(|(&c, r)| c as f64 * r).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceGuard {
    /// Episode ends when ‖e_η‖ exceeds this [rad].
    pub max_attitude_error: f64,
    /// Episode ends when ‖e_p‖ exceeds this [m].
    pub max_position_error: f64,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self { max_attitude_error: 1.0, max_position_error: 10.0 }
    }
}

impl DivergenceGuard {
    pub fn tripped(&self, obs: &Observation) -> bool {
        !obs.is_finite()
            || obs.attitude_error().norm() > self.max_attitude_error
            || obs.position_error().norm() > self.max_position_error
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_layout_and_signs() {
        let mut s = RigidBodyState::default();
        s.position = Vector3::new(1.0, 0.0, 0.0);
        let r = ReferencePoint { position: Vector3::zeros(), velocity: Vector3::zeros(), yaw: 0.0 };
        let o = observe(&s, &r, &AttitudeSetpoint::default());
        assert_eq!(o.position_error(), Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(o.attitude_error(), Vector3::zeros());

        let r = ReferencePoint { position: s.position, velocity: Vector3::zeros(), yaw: 0.0 };
        let o = observe(&s, &r, &AttitudeSetpoint::default());
        assert_eq!(o.position_error(), Vector3::zeros());
    }

    #[test]
    fn gain_update() {
        let base = InnerGains::default();
        assert_eq!(apply_action(&Action::zero(), &base, 0.4), base);
        let mut a = Action::zero();
        a.0[0] = 1.0;
        assert!((apply_action(&a, &base, 0.4).kp1_phitheta - 5.6).abs() < 1e-12);
        let mut a = Action::zero();
        a.0[4] = -1.0;
        assert!((apply_action(&a, &base, 0.4).kd_phitheta - 0.49143).abs() < 1e-12);
    }

    #[test]
    fn reward_branches() {
        assert_eq!(reward(0.05), -25.0);
        assert_eq!(reward(0.04), -25.0);
        assert_eq!(reward(0.01), -15.0);
        assert_eq!(reward(0.001), -10.0);
        assert_eq!(reward(0.0005), -5.0);
        assert_eq!(reward(0.0001), 10.0);
        assert_eq!(reward(0.0002), -1.0);
        assert_eq!(reward(5e-5), 10.0);
        assert_eq!(reward(0.0), 10.0);
        assert_eq!(reward(f64::NAN), -25.0);
    }

    #[test]
    fn counts_to_return() {
        let by_hand = -25.0 * 28.0 - 15.0 * 24.0 - 10.0 * 41.0 - 5.0 * 350.0 - 143.0 + 10.0 * 345.0;
        assert_eq!(by_hand, 87.0);
        assert_eq!(episode_return_from_counts(&[28, 24, 41, 350, 143, 345]), by_hand);
        assert_eq!(episode_return_from_counts(&[0; 6]), 0.0);
        assert_eq!(episode_return_from_counts(&[0, 0, 0, 0, 0, 900]), 9000.0);
    }
}

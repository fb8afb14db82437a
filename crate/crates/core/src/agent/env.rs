//! Mission environment seen by the tuning agent.
//!
//! Physics runs at `dt_physics`, the controller at `dt_ctrl` with motor
//! thrusts held between ticks, and the agent at `dt_agent` with gains held
//! between decisions. Rewards are sampled at agent instants only.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_action, observe, reward, reward_band, Action, DivergenceGuard, Observation, Transition};
use crate::control::{ControlError, Controller, ControllerConfig, GainSet, InnerGains, OuterCommand};
use crate::dynamics::{step_rk4, BodyWrench, QuadrotorParams, RigidBodyState};
use crate::harness::trace::{SimTrace, TraceRecord};
use crate::mixer::thrusts_to_wrench;
use crate::trajectory::{mission_duration, reference_at, ReferencePoint, TrajectoryConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub dt_physics: f64,
    pub dt_ctrl: f64,
    pub dt_agent: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self { dt_physics: 1e-3, dt_ctrl: 5e-3, dt_agent: 0.05 }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    (n >= 1.0 && (r - n).abs() < 1e-9 * n).then_some(n as usize)
}

impl Timing {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt_physics > 0.0 && self.dt_physics <= crate::dynamics::MAX_TIME_STEP) {
            return Err(format!("dt_physics {} outside (0, 0.01]", self.dt_physics));
        }
        if !(self.dt_physics <= self.dt_ctrl && self.dt_ctrl <= self.dt_agent) {
            return Err("require dt_physics <= dt_ctrl <= dt_agent".into());
        }
        if integer_ratio(self.dt_ctrl, self.dt_physics).is_none() {
            return Err("dt_ctrl must be an integer multiple of dt_physics".into());
        }
        if integer_ratio(self.dt_agent, self.dt_ctrl).is_none() {
            return Err("dt_agent must be an integer multiple of dt_ctrl".into());
        }
        Ok(())
    }

    pub fn physics_per_ctrl(&self) -> usize {
        integer_ratio(self.dt_ctrl, self.dt_physics).expect("validated timing")
    }

    pub fn ctrl_per_agent(&self) -> usize {
        integer_ratio(self.dt_agent, self.dt_ctrl).expect("validated timing")
    }
}

/// Additive wrench perturbation applied at every control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Disturbance {
    /// Constant body-moment offset [N·m].
    pub moment_bias: [f64; 3],
    /// Standard deviation of white body-moment noise [N·m].
    pub moment_noise_std: f64,
    /// Standard deviation of white collective-thrust noise [N].
    pub thrust_noise_std: f64,
}

impl Disturbance {
    pub fn is_active(&self) -> bool {
        self.moment_bias.iter().any(|&b| b != 0.0) || self.moment_noise_std > 0.0 || self.thrust_noise_std > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub params: QuadrotorParams,
    /// Manually tuned gains; the inner set is the base of the gain update.
    pub gains: GainSet,
    pub trajectory: TrajectoryConfig,
    pub controller: ControllerConfig,
    pub timing: Timing,
    pub search_rate: f64,
    pub guard: DivergenceGuard,
    pub disturbance: Disturbance,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            params: QuadrotorParams::default(),
            gains: GainSet::default(),
            trajectory: TrajectoryConfig::default(),
            controller: ControllerConfig::default(),
            timing: Timing::default(),
            search_rate: 0.4,
            guard: DivergenceGuard::default(),
            disturbance: Disturbance::default(),
        }
    }
}

impl EnvConfig {
    /// Agent decisions in one full mission.
    pub fn episode_steps(&self) -> usize {
        let ratio = mission_duration(&self.trajectory) / self.timing.dt_agent;
        (ratio - 1e-9).ceil() as usize
    }
}

/// Maps observations to actions.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Action;
}

/// Always returns `n = 0`, i.e. the manually tuned gains.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, _obs: &Observation) -> Action {
        Action::zero()
    }
}

impl<F: FnMut(&Observation) -> Action> Policy for F {
    fn act(&mut self, obs: &Observation) -> Action {
        self(obs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

pub struct TuningEnv {
    cfg: EnvConfig,
    controller: Controller,
    state: RigidBodyState,
    tick: usize,
    step_index: usize,
    total_steps: usize,
    ctrl_per_agent: usize,
    physics_per_ctrl: usize,
    pending: (OuterCommand, bool),
    observation: Observation,
    gains: InnerGains,
    last_action: Action,
    last_reward: f64,
    trace: SimTrace,
    rng: ChaCha8Rng,
    done: bool,
    fault: Option<String>,
}

impl TuningEnv {
    /// Builds the environment and resets it with the given seed.
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, String> {
        cfg.timing.validate()?;
        cfg.params.validate().map_err(|e| e.to_string())?;
        cfg.trajectory.validate().map_err(|e| e.to_string())?;
        cfg.gains.validate().map_err(|e| e.to_string())?;
        let controller = Controller::new(ControllerConfig { dt: cfg.timing.dt_ctrl, ..cfg.controller });
        let ctrl_per_agent = cfg.timing.ctrl_per_agent();
        let physics_per_ctrl = cfg.timing.physics_per_ctrl();
        let total_steps = cfg.episode_steps();
        let gains = cfg.gains.inner;
        let mut env = Self {
            cfg,
            controller,
            state: RigidBodyState::default(),
            tick: 0,
            step_index: 0,
            total_steps,
            ctrl_per_agent,
            physics_per_ctrl,
            pending: (OuterCommand { tau_t: 1.0, setpoint: Default::default(), accel: Vector3::zeros() }, false),
            observation: Observation([0.0; super::OBS_DIM]),
            gains,
            last_action: Action::zero(),
            last_reward: 0.0,
            trace: SimTrace::new(ctrl_per_agent),
            rng: ChaCha8Rng::seed_from_u64(seed),
            done: false,
            fault: None,
        };
        env.reset(seed).map_err(|e| e.to_string())?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn observation(&self) -> Observation {
        self.observation
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn gains(&self) -> InnerGains {
        self.gains
    }

    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation, ControlError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.controller.reset();
        let start = reference_at(0.0, &self.cfg.trajectory).expect("t = 0 is inside the mission");
        self.state = RigidBodyState::at_rest(start.position);
        self.tick = 0;
        self.step_index = 0;
        self.gains = self.cfg.gains.inner;
        self.last_action = Action::zero();
        self.last_reward = 0.0;
        self.trace = SimTrace::new(self.ctrl_per_agent);
        self.done = false;
        self.fault = None;
        self.pending = self.controller.outer(&self.state, &start, &self.cfg.gains.outer, &self.cfg.params)?;
        self.observation = observe(&self.state, &start, &self.pending.0.setpoint);
        Ok(self.observation)
    }

    fn time_of(&self, tick: usize) -> f64 {
        tick as f64 * self.cfg.timing.dt_ctrl
    }

    fn reference(&self, t: f64) -> ReferencePoint {
        let t = t.min(mission_duration(&self.cfg.trajectory));
        reference_at(t, &self.cfg.trajectory).expect("time clamped into the mission")
    }

    fn record(&mut self, t: f64, reference: &ReferencePoint, saturated: bool) {
        let obs = observe(&self.state, reference, &self.pending.0.setpoint);
        let e_eta = obs.attitude_error();
        let e_p = obs.position_error();
        self.trace.records.push(TraceRecord {
            t,
            position: self.state.position.into(),
            attitude: self.state.attitude.into(),
            reference_position: reference.position.into(),
            reference_yaw: reference.yaw,
            position_error: e_p.into(),
            attitude_error: e_eta.into(),
            attitude_error_norm: e_eta.norm(),
            gains: self.gains.to_array(),
            action: self.last_action.0,
            reward: self.last_reward,
            saturated,
        });
    }

    fn perturb(&mut self, mut w: BodyWrench) -> BodyWrench {
        let d = self.cfg.disturbance;
        if !d.is_active() {
            return w;
        }
        w.moment += Vector3::from(d.moment_bias);
        if d.moment_noise_std > 0.0 {
            let n = Normal::new(0.0, d.moment_noise_std).expect("finite std");
            for k in 0..3 {
                w.moment[k] += n.sample(&mut self.rng);
            }
        }
        if d.thrust_noise_std > 0.0 {
            let n = Normal::new(0.0, d.thrust_noise_std).expect("finite std");
            w.thrust = (w.thrust + n.sample(&mut self.rng)).max(0.0);
        }
        w
    }

    fn terminate(&mut self, fault: String) {
        self.done = true;
        self.trace.fault = Some(fault.clone());
        self.fault = Some(fault);
    }

    /// Applies the action for one agent period and returns the next
    /// observation with the reward sampled at its end.
    pub fn step(&mut self, action: Action) -> StepOutcome {
        assert!(!self.done, "step called on a finished episode");
        let action = action.clamped();
        self.last_action = action;
        self.gains = apply_action(&action, &self.cfg.gains.inner, self.cfg.search_rate);

        for j in 0..self.ctrl_per_agent {
            let t = self.time_of(self.tick);
            let reference = self.reference(t);
            if j > 0 {
                match self.controller.outer(&self.state, &reference, &self.cfg.gains.outer, &self.cfg.params) {
                    Ok(cmd) => self.pending = cmd,
                    Err(e) => return self.fail(e.to_string()),
                }
            }
            let (outer, degenerate) = self.pending;
            let out = match self.controller.inner(&self.state, &outer, degenerate, &self.gains, &self.cfg.params) {
                Ok(out) => out,
                Err(e) => return self.fail(e.to_string()),
            };
            self.record(t, &reference, out.saturated);

            let wrench = self.perturb(thrusts_to_wrench(&out.thrusts, &self.cfg.params));
            for _ in 0..self.physics_per_ctrl {
                match step_rk4(&self.state, &wrench, self.cfg.timing.dt_physics, &self.cfg.params) {
                    Ok(next) => self.state = next,
                    Err(e) => {
                        self.tick += 1;
                        return self.fail(e.to_string());
                    }
                }
            }
            self.tick += 1;
        }

        self.step_index += 1;
        let t = self.time_of(self.tick);
        let reference = self.reference(t);
        match self.controller.outer(&self.state, &reference, &self.cfg.gains.outer, &self.cfg.params) {
            Ok(cmd) => self.pending = cmd,
            Err(e) => return self.fail(e.to_string()),
        }
        self.observation = observe(&self.state, &reference, &self.pending.0.setpoint);
        let e_norm = self.observation.attitude_error().norm();
        let r = reward(e_norm);
        self.last_reward = r;

        if self.cfg.guard.tripped(&self.observation) {
            self.terminate(format!("divergence guard tripped at t = {t} s"));
        } else if self.step_index >= self.total_steps {
            self.done = true;
        }
        if self.done {
            self.record(t, &reference, false);
        }
        StepOutcome { observation: self.observation, reward: r, done: self.done }
    }

    fn fail(&mut self, fault: String) -> StepOutcome {
        self.step_index += 1;
        self.last_reward = super::REWARD_LEVELS[0];
        let t = self.time_of(self.tick);
        let reference = self.reference(t);
        if self.state.is_finite() {
            self.observation = observe(&self.state, &reference, &self.pending.0.setpoint);
            self.record(t, &reference, false);
        }
        self.terminate(fault);
        StepOutcome { observation: self.observation, reward: self.last_reward, done: true }
    }

    pub fn into_trace(self) -> SimTrace {
        self.trace
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub transitions: Vec<Transition>,
    pub episode_return: f64,
    /// Steps per reward band, ordered like [`super::REWARD_LEVELS`].
    pub band_counts: [u64; 6],
    pub steps: usize,
    pub terminated_early: bool,
    pub fault: Option<String>,
    pub trace: SimTrace,
}

/// Runs one full mission with `policy` choosing the gain modulation.
pub fn run_policy_episode(cfg: &EnvConfig, policy: &mut dyn Policy, seed: u64) -> Result<EpisodeLog, String> {
    let mut env = TuningEnv::new(cfg.clone(), seed)?;
    let mut transitions = Vec::with_capacity(env.total_steps());
    let mut band_counts = [0u64; 6];
    let mut obs = env.observation();
    while !env.is_done() {
        let action = policy.act(&obs).clamped();
        let out = env.step(action);
        band_counts[reward_band(out.observation.attitude_error().norm())] += 1;
        transitions.push(Transition {
            state: obs,
            action,
            reward: out.reward,
            next_state: out.observation,
            done: out.done,
        });
        obs = out.observation;
    }
    let fault = env.fault().map(str::to_owned);
    let steps = transitions.len();
    let terminated_early = fault.is_some();
    Ok(EpisodeLog {
        episode_return: transitions.iter().map(|t| t.reward).sum(),
        transitions,
        band_counts,
        steps,
        terminated_early,
        fault,
        trace: env.into_trace(),
    })
}

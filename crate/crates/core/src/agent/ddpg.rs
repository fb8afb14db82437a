//! Deep deterministic policy gradient learner for the gain modulation.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::{run_policy_episode, EnvConfig, EpisodeLog, Policy, TuningEnv, ZeroPolicy};
use super::{reward_band, Action, AgentError, Observation, ReplayBuffer, Transition, ACT_DIM, OBS_DIM};
use crate::neural::{ActionBounds, AdamConfig, AdamState, DenseNet, PolicyFile};

/// Additive Gaussian exploration noise with per-episode decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub sigma: f64,
    /// Multiplier applied to `sigma` after every episode.
    pub decay: f64,
    pub sigma_min: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self { sigma: 0.1, decay: 0.999, sigma_min: 0.0 }
    }
}

/// When training may stop early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TrainingTarget {
    /// Moving-average evaluation return to reach.
    Absolute(f64),
    /// Margin over the return of the manually tuned gains on the same mission.
    AboveBaseline(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub l2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Hidden layer widths shared by actor and critic.
    pub hidden: Vec<usize>,
    pub tau_soft: f64,
    pub exploration: ExplorationConfig,
    pub target: TrainingTarget,
    pub max_episodes: usize,
    /// Episodes in the moving average compared against the target.
    pub average_window: usize,
    /// Gradient updates per agent step once the buffer holds a batch.
    pub updates_per_step: usize,
    /// Rewards are multiplied by this before entering the critic targets.
    pub reward_scale: f64,
    /// Weight of the squared excursion of the actor's output pre-activations
    /// beyond the action box, subtracted from the actor objective.
    pub action_penalty: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            l2: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1024,
            buffer_capacity: 1_000_000,
            hidden: vec![128, 128],
            tau_soft: 1e-3,
            exploration: ExplorationConfig::default(),
            target: TrainingTarget::AboveBaseline(150.0),
            max_episodes: 2000,
            average_window: 20,
            updates_per_step: 1,
            reward_scale: 0.01,
            action_penalty: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.l2 >= 0.0 && self.adam_eps > 0.0) {
            return bad("l2 must be non-negative and adam_eps positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return bad("need 0 < batch_size <= buffer_capacity");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau_soft) {
            return bad("tau_soft must lie in [0, 1]");
        }
        let e = &self.exploration;
        if !(e.sigma >= 0.0 && e.sigma_min >= 0.0 && e.decay > 0.0 && e.decay <= 1.0) {
            return bad("exploration needs sigma, sigma_min >= 0 and decay in (0, 1]");
        }
        if self.max_episodes == 0 || self.average_window == 0 || self.updates_per_step == 0 {
            return bad("max_episodes, average_window and updates_per_step must be positive");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite() && self.action_penalty >= 0.0) {
            return bad("reward_scale must be positive and action_penalty non-negative");
        }
        let (TrainingTarget::Absolute(v) | TrainingTarget::AboveBaseline(v)) = self.target;
        if !v.is_finite() {
            return bad("training target must be finite");
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_eps,
            l2: self.l2,
        }
    }
}

/// Losses from one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    /// Mean squared TD error before the critic step.
    pub critic_loss: f64,
    /// Mean `Q(s, μ(s))` before the actor step.
    pub actor_objective: f64,
}

pub struct DdpgAgent {
    pub config: AgentConfig,
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub target_actor: DenseNet,
    pub target_critic: DenseNet,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    sigma: f64,
    pub updates: u64,
}

fn to_action(v: &[f64]) -> Action {
    let mut a = [0.0; ACT_DIM];
    a.copy_from_slice(v);
    Action(a)
}

/// Rows `[s, a]` for the critic.
fn critic_rows(states: &[f64], actions: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(states.len() + actions.len());
    for (s, a) in states.chunks_exact(OBS_DIM).zip(actions.chunks_exact(ACT_DIM)) {
        out.extend_from_slice(s);
        out.extend_from_slice(a);
    }
    out
}

fn stack<'a>(obs: impl Iterator<Item = &'a Observation>) -> Vec<f64> {
    obs.flat_map(|o| o.0).collect()
}

impl DdpgAgent {
    /// Fresh actor, critic and targets initialized from `seed`.
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = DenseNet::actor(OBS_DIM, &config.hidden, ACT_DIM, (-1.0, 1.0), &mut rng)?;
        let critic = DenseNet::critic(OBS_DIM + ACT_DIM, &config.hidden, &mut rng)?;
        Ok(Self {
            actor_opt: AdamState::new(config.adam(config.actor_lr), &actor),
            critic_opt: AdamState::new(config.adam(config.critic_lr), &critic),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng,
            sigma: config.exploration.sigma,
            updates: 0,
            config,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn decay_exploration(&mut self) {
        let e = &self.config.exploration;
        self.sigma = (self.sigma * e.decay).max(e.sigma_min);
    }

    /// Greedy action `μ(s)`.
    pub fn act(&self, obs: &Observation) -> Action {
        to_action(&self.actor.forward(&obs.0).expect("actor takes observations"))
    }

    /// `μ(s)` plus Gaussian noise, clipped back into the action box.
    pub fn explore(&mut self, obs: &Observation) -> Action {
        let mut a = self.act(obs);
        if self.sigma > 0.0 {
            let noise = Normal::new(0.0, self.sigma).expect("finite sigma");
            for n in &mut a.0 {
                *n += noise.sample(&mut self.rng);
            }
        }
        a.clamped()
    }

    /// `y = c·r + γ (1 − done) Q'(s', μ'(s'))` for each transition, with `c`
    /// the reward scale.
    pub fn td_targets(&self, batch: &[Transition]) -> Result<Vec<f64>, AgentError> {
        let n = batch.len();
        let next = stack(batch.iter().map(|t| &t.next_state));
        let next_actions = self.target_actor.forward_cached(&next, n)?;
        let q_next = self.target_critic.forward_cached(&critic_rows(&next, next_actions.output()), n)?;
        Ok(batch
            .iter()
            .zip(q_next.output())
            .map(|(t, q)| {
                let live = if t.done { 0.0 } else { 1.0 };
                self.config.reward_scale * t.reward + self.config.gamma * live * q
            })
            .collect())
    }

    /// One critic regression step, one actor ascent step, then a soft
    /// update of both targets.
    pub fn ddpg_update(&mut self, batch: &[Transition]) -> Result<UpdateStats, AgentError> {
        let n = batch.len();
        if n == 0 {
            return Err(AgentError::InsufficientExperience { available: 0, requested: 1 });
        }
        let inv_n = 1.0 / n as f64;
        let y = self.td_targets(batch)?;
        let states = stack(batch.iter().map(|t| &t.state));
        let actions: Vec<f64> = batch.iter().flat_map(|t| t.action.0).collect();

        let q = self.critic.forward_cached(&critic_rows(&states, &actions), n)?;
        let residual: Vec<f64> = q.output().iter().zip(&y).map(|(q, y)| q - y).collect();
        let critic_loss = residual.iter().map(|r| r * r).sum::<f64>() * inv_n;
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r * inv_n).collect();
        let (critic_grads, _) = self.critic.backward(&q, &upstream)?;
        self.critic_opt.step(&mut self.critic, &critic_grads)?;

        let critic = &self.critic;
        let penalty = self.config.action_penalty;
        let actor_objective =
            Self::actor_ascent(&mut self.actor, &mut self.actor_opt, penalty, &states, n, |actions| {
                let q = critic.forward_cached(&critic_rows(&states, actions), n)?;
                let dq_din = critic.input_gradient(&q, &vec![1.0; n])?;
                let dq_da = dq_din.chunks_exact(OBS_DIM + ACT_DIM).flat_map(|row| row[OBS_DIM..].to_vec()).collect();
                Ok((q.output().to_vec(), dq_da))
            })?;

        let tau = self.config.tau_soft;
        self.target_critic.soft_update_from(&self.critic, tau)?;
        self.target_actor.soft_update_from(&self.actor, tau)?;
        self.updates += 1;
        Ok(UpdateStats { critic_loss, actor_objective })
    }

    /// One Adam step of the actor up the mean of `q(s, μ(s))`. `q` maps a
    /// `batch × ACT_DIM` action matrix to per-sample values and `∂q/∂a`.
    /// Returns the mean value before the step.
    pub fn actor_step_with<F>(&mut self, states: &[f64], q: F) -> Result<f64, AgentError>
    where
        F: FnOnce(&[f64]) -> Result<(Vec<f64>, Vec<f64>), AgentError>,
    {
        let n = states.len() / OBS_DIM;
        Self::actor_ascent(&mut self.actor, &mut self.actor_opt, self.config.action_penalty, states, n, q)
    }

    fn actor_ascent<F>(
        actor: &mut DenseNet,
        opt: &mut AdamState,
        penalty: f64,
        states: &[f64],
        n: usize,
        q: F,
    ) -> Result<f64, AgentError>
    where
        F: FnOnce(&[f64]) -> Result<(Vec<f64>, Vec<f64>), AgentError>,
    {
        let mu = actor.forward_cached(states, n)?;
        let (values, dq_da) = q(mu.output())?;
        let inv_n = 1.0 / n as f64;
        // Descend the negated mean value.
        let upstream: Vec<f64> = dq_da.iter().map(|g| -g * inv_n).collect();
        // The clipped output has zero slope outside the box, so a saturated
        // component would never return without this pull on z.
        let pull: Vec<f64> =
            mu.output_pre().iter().map(|&z| 2.0 * penalty * inv_n * (z - z.clamp(-1.0, 1.0))).collect();
        let (grads, _) = actor.backward_with_output_pre(&mu, &upstream, &pull)?;
        opt.step(actor, &grads)?;
        Ok(values.iter().sum::<f64>() * inv_n)
    }

    /// Samples a batch from the replay buffer and runs [`Self::ddpg_update`].
    pub fn update(&mut self) -> Result<UpdateStats, AgentError> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
        self.ddpg_update(&batch)
    }

    pub fn export_actor(&self) -> Result<PolicyFile, AgentError> {
        Ok(crate::neural::export_policy(&self.actor, ActionBounds::default())?)
    }
}

impl Policy for DenseNet {
    fn act(&mut self, obs: &Observation) -> Action {
        to_action(&self.forward(&obs.0).expect("policy network takes observations"))
    }
}

/// Runs the exported matrices directly, as a deployment target would.
impl Policy for PolicyFile {
    fn act(&mut self, obs: &Observation) -> Action {
        to_action(&self.reconstruct_action(&obs.0).expect("policy file takes observations"))
    }
}

/// One full mission driven by the agent's actor, with exploration noise
/// when `explore` is set. Does not learn.
pub fn run_episode(
    env_cfg: &EnvConfig,
    agent: &mut DdpgAgent,
    explore: bool,
    seed: u64,
) -> Result<EpisodeLog, AgentError> {
    let log = if explore {
        run_policy_episode(env_cfg, &mut |o: &Observation| agent.explore(o), seed)
    } else {
        run_policy_episode(env_cfg, &mut |o: &Observation| agent.act(o), seed)
    };
    log.map_err(AgentError::Environment)
}

/// Noise-free summary of one mission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub episode_return: f64,
    pub rmse: f64,
    pub band_counts: [u64; 6],
    pub steps: usize,
    pub terminated_early: bool,
}

impl EvalRecord {
    pub fn from_log(log: &EpisodeLog) -> Self {
        Self {
            episode_return: log.episode_return,
            rmse: log.trace.attitude_rmse().unwrap_or(f64::NAN),
            band_counts: log.band_counts,
            steps: log.steps,
            terminated_early: log.terminated_early,
        }
    }
}

/// One training episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub episode: usize,
    pub train_return: f64,
    pub train_steps: usize,
    pub eval_return: f64,
    pub eval_rmse: f64,
    pub moving_average: f64,
    pub sigma: f64,
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub updates: u64,
}

pub const CURVE_COLUMNS: [&str; 10] = [
    "episode",
    "train_return",
    "train_steps",
    "eval_return",
    "eval_rmse",
    "moving_average",
    "sigma",
    "critic_loss",
    "actor_objective",
    "updates",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CURVE_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.episode.to_string(),
                r.train_return.to_string(),
                r.train_steps.to_string(),
                r.eval_return.to_string(),
                r.eval_rmse.to_string(),
                r.moving_average.to_string(),
                r.sigma.to_string(),
                r.critic_loss.to_string(),
                r.actor_objective.to_string(),
                r.updates.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

pub struct TrainOutcome {
    /// Learner state at the end of training.
    pub agent: DdpgAgent,
    /// Actor with the best evaluation return (ties go to the lower RMSE).
    pub best_actor: DenseNet,
    pub best_episode: usize,
    pub best_eval: EvalRecord,
    pub baseline: EvalRecord,
    pub target_return: f64,
    pub converged: bool,
    pub curve: TrainingCurve,
}

/// Episodic training with one update per agent step once the buffer holds
/// a full batch. After each episode the greedy actor is evaluated on the
/// nominal mission; training stops when the moving average of evaluation
/// returns reaches the target or at the episode cap.
pub fn train(env_cfg: &EnvConfig, cfg: &AgentConfig, seed: u64) -> Result<TrainOutcome, AgentError> {
    train_with_progress(env_cfg, cfg, seed, &mut |_| {})
}

pub fn train_with_progress(
    env_cfg: &EnvConfig,
    cfg: &AgentConfig,
    seed: u64,
    progress: &mut dyn FnMut(&CurveRow),
) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    let baseline_log = run_policy_episode(env_cfg, &mut ZeroPolicy, seed).map_err(AgentError::Environment)?;
    let baseline = EvalRecord::from_log(&baseline_log);
    let target_return = match cfg.target {
        TrainingTarget::Absolute(v) => v,
        TrainingTarget::AboveBaseline(m) => baseline.episode_return + m,
    };

    let mut agent = DdpgAgent::new(cfg.clone(), seed)?;
    let mut curve = TrainingCurve::default();
    let mut eval_returns = Vec::new();
    let mut best: Option<(EvalRecord, DenseNet, usize)> = None;
    let mut converged = false;

    for episode in 0..cfg.max_episodes {
        let sigma = agent.sigma();
        let mut env =
            TuningEnv::new(env_cfg.clone(), seed.wrapping_add(episode as u64)).map_err(AgentError::Environment)?;
        let mut obs = env.observation();
        let (mut train_return, mut steps) = (0.0, 0);
        let (mut loss_sum, mut obj_sum, mut n_updates) = (0.0, 0.0, 0u64);
        while !env.is_done() {
            let action = agent.explore(&obs);
            let out = env.step(action);
            agent.buffer.push(Transition {
                state: obs,
                action,
                reward: out.reward,
                next_state: out.observation,
                done: out.done,
            });
            train_return += out.reward;
            steps += 1;
            obs = out.observation;
            if agent.buffer.len() >= cfg.batch_size {
                for _ in 0..cfg.updates_per_step {
                    let s = agent.update()?;
                    loss_sum += s.critic_loss;
                    obj_sum += s.actor_objective;
                    n_updates += 1;
                }
            }
        }

        let eval = EvalRecord::from_log(&run_episode(env_cfg, &mut agent, false, seed)?);
        eval_returns.push(eval.episode_return);
        let window = &eval_returns[eval_returns.len().saturating_sub(cfg.average_window)..];
        let moving_average = window.iter().sum::<f64>() / window.len() as f64;
        let better = match &best {
            None => true,
            Some((b, _, _)) => {
                eval.episode_return > b.episode_return
                    || (eval.episode_return == b.episode_return && eval.rmse < b.rmse)
            }
        };
        if better {
            best = Some((eval, agent.actor.clone(), episode));
        }
        let per_update = |x: f64| if n_updates > 0 { x / n_updates as f64 } else { f64::NAN };
        let row = CurveRow {
            episode,
            train_return,
            train_steps: steps,
            eval_return: eval.episode_return,
            eval_rmse: eval.rmse,
            moving_average,
            sigma,
            critic_loss: per_update(loss_sum),
            actor_objective: per_update(obj_sum),
            updates: agent.updates,
        };
        progress(&row);
        curve.rows.push(row);
        agent.decay_exploration();
        if moving_average >= target_return {
            converged = true;
            break;
        }
    }

    let (best_eval, best_actor, best_episode) = best.expect("at least one episode runs");
    Ok(TrainOutcome { agent, best_actor, best_episode, best_eval, baseline, target_return, converged, curve })
}

/// Steps per reward band for a finished log, recomputed from its transitions.
pub fn band_histogram(transitions: &[Transition]) -> [u64; 6] {
    let mut counts = [0u64; 6];
    for t in transitions {
        counts[reward_band(t.next_state.attitude_error().norm())] += 1;
    }
    counts
}

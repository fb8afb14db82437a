use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quadtune::agent::ddpg::{run_episode, train, AgentConfig, DdpgAgent, ExplorationConfig, TrainingTarget};
use quadtune::agent::env::{run_policy_episode, EnvConfig, ZeroPolicy};
use quadtune::agent::{apply_action, observe, reward, Action, Observation, ReplayBuffer, Transition, OBS_DIM};
use quadtune::control::{AttitudeSetpoint, InnerGains};
use quadtune::dynamics::RigidBodyState;
use quadtune::harness::{compare, metrics, simulate, GainSource, RunConfig, SimTrace};
use quadtune::neural::DenseNet;
use quadtune::trajectory::ReferencePoint;

fn obs_from(seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Observation(std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
}

fn transition(k: usize) -> Transition {
    let o = obs_from(k as u64);
    Transition { state: o, action: Action::zero(), reward: k as f64, next_state: o, done: false }
}

fn small_agent() -> AgentConfig {
    AgentConfig { hidden: vec![16, 16], ..AgentConfig::default() }
}

#[test]
fn reward_is_non_increasing_in_error() {
    let mut prev = reward(0.0);
    for k in 1..=200_000 {
        let e = k as f64 * 5e-7;
        let r = reward(e);
        assert!(r <= prev, "reward rises at {e}");
        prev = r;
    }
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(10);
    for k in 0..10 {
        buf.push(transition(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws = 100_000;
    let mut counts = [0u32; 10];
    for _ in 0..draws {
        for t in buf.sample(3, &mut rng).unwrap() {
            counts[t.reward as usize] += 1;
        }
    }
    let p = 0.3;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn frozen_quadratic_critic_pulls_actions_to_zero() {
    let mut agent = DdpgAgent::new(small_agent(), 5).unwrap();
    let states: Vec<f64> = (0..64).flat_map(|k| obs_from(100 + k).0).collect();
    let mean_sq = |a: &DenseNet| -> f64 {
        states.chunks_exact(OBS_DIM).map(|s| a.forward(s).unwrap().iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
            / 64.0
    };
    let before = mean_sq(&agent.actor);
    for _ in 0..50 {
        agent
            .actor_step_with(&states, |a| {
                let q = a.chunks_exact(5).map(|r| -r.iter().map(|x| x * x).sum::<f64>()).collect();
                Ok((q, a.iter().map(|x| -2.0 * x).collect()))
            })
            .unwrap();
    }
    let after = mean_sq(&agent.actor);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn ddpg_update_moves_targets_by_tau() {
    let cfg = AgentConfig { hidden: vec![8, 8], batch_size: 32, buffer_capacity: 64, ..AgentConfig::default() };
    let mut agent = DdpgAgent::new(cfg, 3).unwrap();
    for k in 0..40 {
        agent.buffer.push(Transition { reward: -10.0, done: k % 7 == 0, ..transition(k) });
    }
    let target_before = agent.target_critic.clone();
    let stats = agent.update().unwrap();
    assert!(stats.critic_loss.is_finite() && stats.actor_objective.is_finite());
    let tau = agent.config.tau_soft;
    for ((t, t0), s) in agent.target_critic.params().zip(target_before.params()).zip(agent.critic.params()) {
        assert!((t - (tau * s + (1.0 - tau) * t0)).abs() < 1e-15);
    }
}

#[test]
fn greedy_episode_is_reproducible_and_zero_action_matches_manual() {
    let env = EnvConfig::default();
    let mut agent = DdpgAgent::new(small_agent(), 8).unwrap();
    let a = run_episode(&env, &mut agent, false, 4).unwrap();
    let b = run_episode(&env, &mut agent, false, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.steps, 900);

    let manual = run_policy_episode(&env, &mut ZeroPolicy, 4).unwrap();
    let zero = run_policy_episode(&env, &mut |_: &Observation| Action::zero(), 4).unwrap();
    assert_eq!(manual, zero);
}

#[test]
fn training_stop_rules() {
    let env = EnvConfig::default();
    let one = train(&env, &AgentConfig { max_episodes: 1, ..small_agent() }, 2).unwrap();
    assert_eq!(one.curve.len(), 1);

    let easy = AgentConfig { target: TrainingTarget::Absolute(-1e9), max_episodes: 5, ..small_agent() };
    let out = train(&env, &easy, 2).unwrap();
    assert!(out.converged);
    assert_eq!(out.curve.len(), 1);
}

#[test]
fn noiseless_first_rollout_matches_greedy_episode() {
    let env = EnvConfig::default();
    let cfg = AgentConfig {
        max_episodes: 1,
        exploration: ExplorationConfig { sigma: 0.0, decay: 1.0, sigma_min: 0.0 },
        ..small_agent()
    };
    let out = train(&env, &cfg, 6).unwrap();
    let mut fresh = DdpgAgent::new(cfg, 6).unwrap();
    let greedy = run_episode(&env, &mut fresh, false, 6).unwrap();
    assert_eq!(out.curve.rows[0].train_return, greedy.episode_return);
    assert_eq!(out.curve.rows[0].eval_return, greedy.episode_return);
    assert_eq!(out.agent.buffer.len(), greedy.steps);
    for (stored, seen) in out.agent.buffer.iter().zip(&greedy.transitions) {
        assert_eq!(stored, seen);
    }
}

#[test]
fn trace_csv_reproduces_metrics() {
    let mut cfg = RunConfig::default();
    cfg.disturbance.moment_noise_std = 1e-3;
    let trace = simulate(&cfg, GainSource::Manual).unwrap();
    let text = trace.to_csv_string().unwrap();
    let back = SimTrace::read_csv(text.as_bytes(), cfg.timing.ctrl_per_agent()).unwrap();
    assert_eq!(metrics(&back).unwrap(), metrics(&trace).unwrap());
    assert_eq!(back.to_csv_string().unwrap(), text);
}

#[test]
fn compare_is_antisymmetric() {
    let cfg = RunConfig::default();
    let manual = simulate(&cfg, GainSource::Manual).unwrap();
    let actor = DdpgAgent::new(small_agent(), 1).unwrap().actor;
    let tuned = simulate(&cfg, GainSource::Agent(&actor)).unwrap();
    let ab = compare(&manual, &tuned).unwrap();
    let ba = compare(&tuned, &manual).unwrap();
    assert_eq!(ab.rmse_delta, -ba.rmse_delta);
    assert_eq!(ab.return_delta, -ba.return_delta);
    assert_eq!((ab.a, ab.b), (ba.b, ba.a));
}

fn vec3(range: std::ops::Range<f64>) -> impl Strategy<Value = Vector3<f64>> {
    (range.clone(), range.clone(), range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #[test]
    fn gains_stay_within_search_band(n in prop::array::uniform5(-1.0f64..=1.0), a in 0.01f64..0.99) {
        let base = InnerGains::default();
        let k = apply_action(&Action(n), &base, a).to_array();
        for (k, b) in k.iter().zip(base.to_array()) {
            prop_assert!(*k >= b * (1.0 - a) && *k <= b * (1.0 + a));
        }
    }

    #[test]
    fn actor_outputs_stay_in_action_box(seed in 0u64..50, obs in prop::array::uniform12(-1e3f64..1e3)) {
        let net = DenseNet::actor(12, &[16, 16], 5, (-1.0, 1.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for y in net.forward(&obs).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn position_error_reconstructs_reference(p in vec3(-10.0..10.0), pr in vec3(-10.0..10.0), eta in vec3(-1.0..1.0)) {
        let mut s = RigidBodyState::at_rest(p);
        s.attitude = eta;
        let r = ReferencePoint { position: pr, velocity: Vector3::zeros(), yaw: 0.0 };
        let o = observe(&s, &r, &AttitudeSetpoint::default());
        prop_assert!((o.position() + o.position_error() - pr).amax() <= 1e-15 * pr.amax().max(1.0));
        prop_assert_eq!(o.attitude(), eta);
    }

    #[test]
    fn replay_keeps_newest_within_capacity(cap in 1usize..20, pushes in 0usize..60) {
        let mut buf = ReplayBuffer::new(cap);
        for k in 0..pushes {
            buf.push(transition(k));
            prop_assert!(buf.len() <= cap);
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let expected: Vec<f64> = (pushes.saturating_sub(cap)..pushes).map(|k| k as f64).collect();
        prop_assert_eq!(kept, expected);
    }
}

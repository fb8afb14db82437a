use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quadtune::agent::ddpg::{train_with_progress, DdpgAgent};
use quadtune::agent::OBS_DIM;
use quadtune::harness::{compare, metrics, simulate, GainSource, HarnessError, RunConfig, SimTrace};
use quadtune::neural::{export_policy, ActionBounds, PolicyFile};

#[derive(Parser)]
#[command(name = "quadtune", version, about = "Quadrotor attitude-gain tuning with DDPG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the mission and write the control-rate trace as CSV.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `manual`, or `policy <FILE>`.
        #[arg(long, num_args = 1..=2, value_names = ["SOURCE", "FILE"], default_values = ["manual"])]
        gains: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an actor and export the best one.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_policy: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Overrides the episode cap in the config file.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare a policy against the manual gains on the configured mission.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional trace of the policy run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metrics of two traces side by side.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Supplies the agent period used to pick rewards out of the traces.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rewrite a policy file (format chosen by extension: `.bin` or JSON), or
    /// export a freshly initialized actor with `--init-seed`.
    ExportPolicy {
        #[arg(long, conflicts_with = "init_seed", required_unless_present = "init_seed")]
        policy: Option<PathBuf>,
        #[arg(long)]
        init_seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a policy file rebuilds its actor exactly on random observations.
    ReconstructCheck {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_trace(trace: &SimTrace, cfg: &RunConfig, path: &Path) -> Result<(), HarnessError> {
    trace.write_csv(fs::File::create(path)?)?;
    cfg.write_beside(path)?;
    Ok(())
}

fn print_metrics(label: &str, trace: &SimTrace) -> Result<(), HarnessError> {
    let m = metrics(trace)?;
    println!("{label}");
    println!("  |e_eta| RMSE     {:.6e} rad", m.rmse_attitude);
    println!("  peak |e_eta|     {:.6e} rad at t = {:.3} s", m.peak_attitude_error, m.peak_time);
    println!("  position RMSE    {:.6e} m", m.rmse_position);
    println!("  episode return   {}", m.episode_return);
    println!("  gain min         {:?}", m.gain_min);
    println!("  gain max         {:?}", m.gain_max);
    if let Some(f) = &trace.fault {
        println!("  fault            {f}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate { config, gains, out } => {
            let cfg = load_config(config.as_deref())?;
            let policy = match gains.as_slice() {
                [m] if m == "manual" => None,
                [p, file] if p == "policy" => Some(PolicyFile::load(Path::new(file))?),
                _ => return Err(HarnessError::Usage("--gains takes `manual` or `policy <FILE>`".into())),
            };
            let source = policy.as_ref().map_or(GainSource::Manual, GainSource::Policy);
            let trace = simulate(&cfg, source)?;
            print_metrics(&format!("{} gains", gains[0]), &trace)?;
            if let Some(path) = out.or(cfg.output.trace.clone()) {
                write_trace(&trace, &cfg, &path)?;
                println!("trace written to {}", path.display());
            }
        }
        Command::Train { config, seed, out_policy, curve, episodes } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = episodes {
                cfg.agent.max_episodes = n;
            }
            cfg.validate()?;
            let out = train_with_progress(&cfg.env_config(), &cfg.agent, cfg.seed, &mut |r| {
                eprintln!(
                    "episode {:>4}  train {:>7}  eval {:>7}  avg {:>9.1}  rmse {:.4e}  sigma {:.4}",
                    r.episode, r.train_return, r.eval_return, r.moving_average, r.eval_rmse, r.sigma
                );
            })?;
            println!("baseline return {}  rmse {:.6e}", out.baseline.episode_return, out.baseline.rmse);
            println!(
                "best episode {}  return {}  rmse {:.6e}  target {}  {}",
                out.best_episode,
                out.best_eval.episode_return,
                out.best_eval.rmse,
                out.target_return,
                if out.converged { "reached" } else { "not reached" }
            );
            if let Some(path) = curve.or(cfg.output.curve.clone()) {
                out.curve.write_csv(fs::File::create(&path)?)?;
                cfg.write_beside(&path)?;
                println!("training curve written to {}", path.display());
            }
            let policy_path = out_policy.or(cfg.output.policy.clone()).unwrap_or_else(|| PathBuf::from("policy.json"));
            export_policy(&out.best_actor, ActionBounds::default())?.save(&policy_path)?;
            cfg.write_beside(&policy_path)?;
            println!("policy written to {}", policy_path.display());
        }
        Command::Evaluate { policy, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let file = PolicyFile::load(&policy)?;
            let manual = simulate(&cfg, GainSource::Manual)?;
            let tuned = simulate(&cfg, GainSource::Policy(&file))?;
            let c = compare(&manual, &tuned)?;
            print!("{}", c.render_table("Manually tuned", "RL fine-tuned"));
            println!("gain envelope  min {:?}", c.b.gain_min);
            println!("               max {:?}", c.b.gain_max);
            if let Some(f) = &tuned.fault {
                println!("policy run fault: {f}");
            }
            if let Some(path) = out {
                write_trace(&tuned, &cfg, &path)?;
            }
        }
        Command::Compare { a, b, config } => {
            let cfg = load_config(config.as_deref())?;
            let ticks = cfg.timing.ctrl_per_agent();
            let read = |p: &Path| -> Result<SimTrace, HarnessError> {
                let f = fs::File::open(p).map_err(|e| HarnessError::Trace(format!("{}: {e}", p.display())))?;
                SimTrace::read_csv(f, ticks)
            };
            let c = compare(&read(&a)?, &read(&b)?)?;
            print!("{}", c.render_table(&a.display().to_string(), &b.display().to_string()));
        }
        Command::ExportPolicy { policy, init_seed, config, out } => {
            let file = match (policy, init_seed) {
                (Some(p), _) => PolicyFile::load(&p)?,
                (None, Some(seed)) => {
                    let cfg = load_config(config.as_deref())?;
                    DdpgAgent::new(cfg.agent.clone(), seed)?.export_actor()?
                }
                (None, None) => return Err(HarnessError::Usage("need --policy or --init-seed".into())),
            };
            file.save(&out)?;
            println!("policy written to {}", out.display());
        }
        Command::ReconstructCheck { policy, trials, seed } => {
            let file = PolicyFile::load(&policy)?;
            let net = file.to_network()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut max_dev = 0.0f64;
            for _ in 0..trials {
                let obs: Vec<f64> = (0..file.obs_dim).map(|k| sample_obs(k, &mut rng)).collect();
                let a = net.forward(&obs)?;
                let b = file.reconstruct_action(&obs)?;
                for (x, y) in a.iter().zip(&b) {
                    max_dev = max_dev.max((x - y).abs());
                    if x.to_bits() != y.to_bits() {
                        max_dev = max_dev.max(f64::MIN_POSITIVE);
                    }
                }
            }
            println!("trials {trials}  max deviation {max_dev:e}");
            if max_dev != 0.0 {
                return Err(HarnessError::Simulation("reconstructed actions differ from the network".into()));
            }
        }
    }
    Ok(())
}

/// Observation components drawn from a box around the flight envelope.
fn sample_obs(k: usize, rng: &mut impl Rng) -> f64 {
    let half_width = match k % OBS_DIM {
        0..=2 => 10.0,
        3..=5 => 1.5,
        6..=8 => 5.0,
        _ => 0.5,
    };
    rng.random_range(-half_width..=half_width)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

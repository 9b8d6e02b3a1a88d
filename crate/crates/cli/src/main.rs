use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dfl_core::harness::config::{PolicyKind, SimConfig};
use dfl_core::harness::experiment::{run_experiment, train_policy};
use dfl_core::harness::metrics::emit_metrics;
use dfl_core::policy::checkpoint::{self, Checkpoint};
use dfl_core::rng;
use dfl_core::spectral::{check_bound, random_admissible_trace, random_innovation, random_row_stochastic, LinearTrace};

#[derive(Parser)]
#[command(name = "dfl-sim", version, about = "Decentralized Bayesian federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a run and write per-round metrics and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<PolicyKind>,
        /// Trained policy; required for `--policy gnn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the graph policy offline and write a checkpoint.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        /// Continue training from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check the consensus-error bound on random linearized traces.
    VerifyBound(BoundArgs),
    /// Run a grid over the Byzantine count or the policy.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        over: SweepAxis,
        /// Comma-separated values: counts for `byzantine`, names for `policy`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per grid point, starting at `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => SimConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    traces: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    devices: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    rounds: Vec<usize>,
    /// Parameter dimension of the innovations.
    #[arg(long, default_value_t = 3)]
    dims: usize,
    #[arg(long, default_value_t = 1.0)]
    lipschitz: f64,
    /// Mix with row-stochastic matrices instead of doubly stochastic ones;
    /// the bound is not guaranteed there.
    #[arg(long)]
    row_stochastic: bool,
    /// Directory for a per-trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    Byzantine,
    Policy,
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse().map_err(|e: dfl_core::Error| e.to_string())
}

fn load_checkpoint(path: Option<&Path>, policy: PolicyKind) -> Result<Option<Checkpoint>> {
    match path {
        Some(p) => Ok(Some(checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?)),
        None if policy == PolicyKind::Gnn => bail!("--policy gnn needs --checkpoint"),
        None => Ok(None),
    }
}

fn run(common: &Common, policy: Option<PolicyKind>, ck: Option<&Path>) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(p) = policy {
        cfg.policy = p;
    }
    let ck = load_checkpoint(ck, cfg.policy)?;
    let out = run_experiment(&cfg, ck.as_ref())?;
    let files = emit_metrics(&common.out, "run", &out.metrics, &out.summary)?;
    let s = &out.summary;
    println!(
        "{} rounds, policy {}: final accuracy {}, mean xi {}, {} security / {} privacy violations",
        s.rounds,
        cfg.policy,
        fmt_opt(s.final_mean_accuracy),
        fmt_opt(s.mean_xi),
        s.total_security_violations,
        s.total_privacy_violations
    );
    println!("wrote {} and {}", files.csv.display(), files.summary.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn train(common: &Common, episodes: usize, start: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let start = start.map(checkpoint::load).transpose().context("loading start checkpoint")?;
    let report = train_policy(&cfg, episodes, start.as_ref())?;
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("policy.ckpt");
    checkpoint::save(&path, &report.checkpoint)?;

    let mut w = csv::Writer::from_path(common.out.join("training.csv"))?;
    w.write_record(["episode", "mean_reward", "surrogate", "critic_loss"])?;
    for (e, (r, u)) in report.episode_rewards.iter().zip(&report.updates).enumerate() {
        w.write_record([e.to_string(), r.to_string(), u.surrogate.to_string(), u.critic_loss.to_string()])?;
    }
    w.flush()?;
    if let (Some(first), Some(last)) = (report.episode_rewards.first(), report.episode_rewards.last()) {
        println!("{episodes} episodes: mean reward {first:.4} -> {last:.4}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    trace: usize,
    devices: usize,
    rounds: usize,
    lhs: f64,
    rhs: f64,
    holds: bool,
}

fn verify_bound(args: &BoundArgs) -> Result<bool> {
    if args.devices.is_empty() || args.rounds.is_empty() || args.devices.contains(&0) || args.rounds.contains(&0) {
        bail!("--devices and --rounds need positive values");
    }
    if !(args.lipschitz > 0.0) || args.dims == 0 {
        bail!("--lipschitz and --dims must be positive");
    }
    let mut r = rng::stream(args.seed, &[]);
    let mut rows = Vec::with_capacity(args.traces);
    for k in 0..args.traces {
        let m = args.devices[k % args.devices.len()];
        let t = args.rounds[(k / args.devices.len()) % args.rounds.len()];
        let trace = if args.row_stochastic {
            LinearTrace {
                lipschitz: args.lipschitz,
                chain: (0..t).map(|_| random_row_stochastic(m, &mut r)).collect(),
                innovations: (0..t).map(|_| random_innovation(args.dims, m, args.lipschitz, &mut r)).collect(),
            }
        } else {
            random_admissible_trace(m, t, args.dims, args.lipschitz, &mut r)
        };
        let check = check_bound(&trace)?;
        rows.push(BoundRow {
            trace: k,
            devices: m,
            rounds: t,
            lhs: check.lhs,
            rhs: check.rhs,
            holds: check.holds,
        });
    }
    let held = rows.iter().filter(|r| r.holds).count();
    println!("bound held on {held}/{} traces", rows.len());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("bound.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(held == rows.len())
}

#[derive(Serialize)]
struct SweepRow {
    axis: &'static str,
    value: String,
    seed: u64,
    final_mean_accuracy: Option<f64>,
    mean_xi: Option<f64>,
    security_violations: usize,
    privacy_violations: usize,
    detection_tp: usize,
    detection_fp: usize,
    total_energy_j: f64,
    median_h: Option<f64>,
}

fn sweep(common: &Common, axis: SweepAxis, values: &[String], seeds: u64, ck: Option<&Path>) -> Result<()> {
    let base = common.load()?;
    let ck = ck.map(checkpoint::load).transpose().context("loading checkpoint")?;
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for value in values {
        let mut cfg = base.clone();
        let name = match axis {
            SweepAxis::Byzantine => {
                cfg.byzantine = value.parse().with_context(|| format!("bad Byzantine count '{value}'"))?;
                "byzantine"
            }
            SweepAxis::Policy => {
                cfg.policy = parse_policy(value).map_err(anyhow::Error::msg)?;
                "policy"
            }
        };
        if cfg.policy == PolicyKind::Gnn && ck.is_none() {
            bail!("sweeping the gnn policy needs --checkpoint");
        }
        for s in 0..seeds {
            cfg.seed = base.seed + s;
            let out = run_experiment(&cfg, ck.as_ref())?;
            let m = &out.summary;
            w.serialize(SweepRow {
                axis: name,
                value: value.clone(),
                seed: cfg.seed,
                final_mean_accuracy: m.final_mean_accuracy,
                mean_xi: m.mean_xi,
                security_violations: m.total_security_violations,
                privacy_violations: m.total_privacy_violations,
                detection_tp: m.detection_tp,
                detection_fp: m.detection_fp,
                total_energy_j: m.total_energy_j,
                median_h: m.median_h,
            })?;
        }
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            common,
            policy,
            checkpoint,
        } => run(common, *policy, checkpoint.as_deref()).map(|_| true),
        Command::TrainPolicy {
            common,
            episodes,
            checkpoint,
        } => train(common, *episodes, checkpoint.as_deref()).map(|_| true),
        Command::VerifyBound(args) => verify_bound(args),
        Command::Sweep {
            common,
            over,
            values,
            seeds,
            checkpoint,
        } => sweep(common, *over, values, *seeds, checkpoint.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

//! Command-line front end: `train`, `eval`, `replay`, `render` and
//! `validate-config`, all driven by one JSON [`RunConfig`].
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 replay
//! mismatch. Diagnostics go to standard error; results go to files.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pedsim::evalrig::{self, EpisodeLog, ReplayVerdict};
use pedsim::nn::PolicyParams;
use pedsim::ppo;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pedsim", version, about = "Train and evaluate adversarial pedestrians against rule-based drivers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a pedestrian policy with PPO.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides PEDSIM_OUTPUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for env, trainer and eval (overrides PEDSIM_SEED and the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint over the town × driving-policy matrix.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Policy checkpoint (falls back to `eval.checkpoint` in the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-simulate an episode log and compare it tick by tick.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Draw an episode log as an SVG top view.
    Render {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a config without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Mismatch(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
        Err(Failure::Mismatch(m)) => {
            eprintln!("replay mismatch: {m}");
            EXIT_MISMATCH
        }
    }
}

fn env_var(k: &str) -> Option<String> {
    std::env::var(k).ok()
}

fn load_config(path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(out, seed, env_var)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, out.as_deref(), seed)?;
            let dir = cfg.output_dir.clone();
            write_resolved(&cfg, &dir)?;
            let n = cfg.ppo.n_updates();
            let every = (n / 20).max(1);
            let result = ppo::train(&cfg.env, &cfg.ppo, Some(&dir), |s| {
                if s.update % every == 0 || s.update == n {
                    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
                    eprintln!(
                        "update {}/{n} steps {} reward {} ep_len {} entropy {:.3}",
                        s.update,
                        s.steps,
                        fmt(s.mean_reward),
                        fmt(s.mean_ep_len),
                        s.entropy
                    );
                }
            })
            .map_err(anyhow::Error::from)?;
            eprintln!("wrote {} checkpoints to {}", result.checkpoints.len(), dir.display());
            Ok(())
        }
        Command::Eval { config, checkpoint, out, seed } => {
            let cfg = load_config(&config, out.as_deref(), seed)?;
            let ckpt = checkpoint
                .or_else(|| cfg.eval.checkpoint.clone())
                .ok_or_else(|| Failure::Usage("no checkpoint: pass --checkpoint or set eval.checkpoint".into()))?;
            let params = PolicyParams::load(&ckpt).map_err(|e| anyhow::anyhow!("{}: {e}", ckpt.display()))?;
            let dir = cfg.output_dir.clone();
            write_resolved(&cfg, &dir)?;
            let report = evalrig::cross_matrix(&cfg.eval, &cfg.env, &params).map_err(anyhow::Error::from)?;
            evalrig::write_report(&dir, &report).map_err(anyhow::Error::from)?;
            eprint!("{}", evalrig::format_table(&report.cells));
            Ok(())
        }
        Command::Replay { log } => {
            let episode = EpisodeLog::read(&log).map_err(|e| anyhow::anyhow!("{}: {e}", log.display()))?;
            match evalrig::replay(&episode).map_err(anyhow::Error::from)? {
                ReplayVerdict::Pass => {
                    eprintln!("replay ok: {} ticks match", episode.ticks.len());
                    Ok(())
                }
                other => Err(Failure::Mismatch(format!("{other:?}"))),
            }
        }
        Command::Render { log, out } => {
            let episode = EpisodeLog::read(&log).map_err(|e| anyhow::anyhow!("{}: {e}", log.display()))?;
            evalrig::render_svg(&episode, &out).map_err(anyhow::Error::from)?;
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config, None, None)?;
            eprintln!(
                "config ok: {} / {:?} / {}, {} training steps, {} eval cells",
                cfg.env.town,
                cfg.env.driving_policy,
                cfg.env.reward.as_str(),
                cfg.ppo.total_steps,
                cfg.eval.towns.len() * cfg.eval.policies.len()
            );
            Ok(())
        }
    }
}

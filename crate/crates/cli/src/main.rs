use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hbml_cli::commands::{self, ORACLE_TOL};
use hbml_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "hbml", version, about = "Meta-learning as hierarchical Bayes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set inner.alpha=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write metrics, checkpoint and run metadata.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `run.output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Adapt to tasks and write per-point predictions.
    Adapt {
        #[command(flatten)]
        ckpt: WithCheckpoint,
        /// CSV of tasks (`task_id,set,x0..,target`); a seeded draw otherwise.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        task_seed: Option<u64>,
        #[arg(long, default_value = "predictions.csv")]
        output: PathBuf,
    },
    /// Score adapted performance over fresh episodes.
    Eval {
        #[command(flatten)]
        ckpt: WithCheckpoint,
        /// Defaults to `eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "eval.csv")]
        output: PathBuf,
    },
    /// Draw posterior predictive curves for sinusoid tasks.
    Sample {
        #[command(flatten)]
        ckpt: WithCheckpoint,
        /// Restrict support inputs to `[A, B]`.
        #[arg(long, num_args = 2, value_names = ["A", "B"], allow_negative_numbers = true)]
        window: Option<Vec<f64>>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        #[arg(long, default_value = "predictions.csv")]
        output: PathBuf,
    },
    /// Check gradient descent against the closed-form prior on random linear problems.
    VerifyOracle {
        #[arg(long, default_value_t = 8)]
        max_dim: usize,
        #[arg(long, default_value_t = 20)]
        max_k: usize,
        #[arg(long, default_value_t = 200)]
        problems: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "oracle_report.csv")]
        output: PathBuf,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

enum Outcome {
    Ok,
    OracleFailed,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Train { common, output_dir } => {
            let mut cfg = load(&common)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            commands::train(&cfg)?;
        }
        Command::Adapt {
            ckpt,
            tasks,
            task_seed,
            output,
        } => {
            let cfg = load(&ckpt.common)?;
            commands::adapt(&cfg, &ckpt.checkpoint, tasks.as_deref(), task_seed, &output)?;
        }
        Command::Eval { ckpt, episodes, output } => {
            let cfg = load(&ckpt.common)?;
            commands::eval(&cfg, &ckpt.checkpoint, episodes.unwrap_or(cfg.eval_episodes), &output)?;
        }
        Command::Sample {
            ckpt,
            window,
            n_samples,
            scale,
            tasks,
            output,
        } => {
            let cfg = load(&ckpt.common)?;
            let window = window.map(|w| (w[0], w[1]));
            let n = n_samples.unwrap_or(cfg.sample_n);
            commands::sample(
                &cfg,
                &ckpt.checkpoint,
                window,
                n,
                scale.unwrap_or(cfg.sample_scale),
                tasks,
                &output,
            )?;
        }
        Command::VerifyOracle {
            max_dim,
            max_k,
            problems,
            seed,
            output,
        } => {
            let rows = commands::verify_oracle(max_dim, max_k, problems, seed, &output)?;
            let worst = rows.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
            let failed = rows.iter().filter(|r| !(r.max_abs_err < ORACLE_TOL)).count();
            println!(
                "{} problems, worst max_abs_err {worst:e}, {failed} above {ORACLE_TOL:e}",
                rows.len()
            );
            if failed > 0 {
                return Ok(Outcome::OracleFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::OracleFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| c.downcast_ref::<hbml::Error>().is_some_and(hbml::Error::is_numeric));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

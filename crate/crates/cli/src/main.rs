use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stepwise::checkpoint::Checkpoint;
use stepwise::config::RunConfig;
use stepwise::refine::RefineConfig;
use stepwise::runner::{self, BLEND_CKPT_FILE};

#[derive(Parser)]
#[command(name = "stepwise", version, about = "Train and evaluate learned sampler policies on toy worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Generations per class.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; with --ckpt, resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Total iterations (overrides the config).
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint in inference mode.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the config's hand-crafted schedule.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Best-of-(M+1) generation with optional value-guided lookahead.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "refine-m")]
        refine_m: Option<usize>,
        #[arg(long = "refine-k")]
        refine_k: Option<usize>,
        #[arg(long)]
        lookahead: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Blend sweep; trains the fidelity policy first if the checkpoint has none.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated blend weights.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Fidelity-policy training iterations (overrides the config).
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn samples(common: &Common, config: &RunConfig) -> usize {
    common.samples.unwrap_or(config.eval.samples)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            ckpt,
            iterations,
            common,
        } => {
            let resume = ckpt.as_deref().map(load_ckpt).transpose()?;
            let mut cfg = match (&config, &resume) {
                (Some(path), _) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
                (None, Some(c)) => c.config.clone(),
                (None, None) => bail!("train needs --config or --ckpt"),
            };
            if let Some(seed) = common.seed {
                if resume.is_some() {
                    bail!("--seed cannot change the seed of a resumed run");
                }
                cfg.seed = seed;
            }
            if let (Some(r), Some(_)) = (&resume, &config) {
                if r.config != cfg {
                    bail!("--config differs from the configuration stored in the checkpoint");
                }
            }
            let summary = runner::train(&cfg, &common.out, iterations, resume.as_ref())?;
            let last = summary.logs.last();
            say(format_args!(
                "trained to iteration {} (last mean reward {})",
                summary.trainer.iteration(),
                last.map(|l| format!("{:.4}", l.mean_reward)).unwrap_or_else(|| "n/a".into())
            ));
        }
        Command::Eval { ckpt, common } => {
            let ckpt = load_ckpt(&ckpt)?;
            let seed = common.seed.unwrap_or(ckpt.config.seed);
            let report = runner::eval(&ckpt, samples(&common, &ckpt.config), seed)?;
            runner::write_report(&common.out, &report)?;
            print_metrics(&report);
        }
        Command::Baseline { config, common } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("reading config {}", config.display()))?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let report = runner::baseline(&cfg, samples(&common, &cfg), seed)?;
            runner::write_report(&common.out, &report)?;
            print_metrics(&report);
        }
        Command::Refine {
            ckpt,
            refine_m,
            refine_k,
            lookahead,
            common,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let base = ckpt.config.refine;
            let rc = RefineConfig {
                m: refine_m.unwrap_or(base.m),
                k: refine_k.unwrap_or(base.k),
                lookahead: lookahead || base.lookahead,
            };
            let seed = common.seed.unwrap_or(ckpt.config.seed);
            let report = runner::refine(&ckpt, &rc, samples(&common, &ckpt.config), seed)?;
            runner::write_report(&common.out, &report)?;
            print_metrics(&report);
        }
        Command::Sweep {
            ckpt,
            lambda,
            iterations,
            common,
        } => {
            let mut ckpt = load_ckpt(&ckpt)?;
            if ckpt.fidelity_agent.is_none() {
                ckpt = runner::train_blend(&ckpt, iterations)?;
                ckpt.save(&common.out.join(BLEND_CKPT_FILE))?;
            }
            let lambdas = lambda.unwrap_or_else(|| ckpt.config.blend.sweep.clone());
            let seed = common.seed.unwrap_or(ckpt.config.seed);
            let report = runner::sweep(&ckpt, &lambdas, samples(&common, &ckpt.config), seed)?;
            runner::write_report(&common.out, &report)?;
            for row in &report.sweep {
                say(format_args!(
                    "lambda {:.2}: fidelity {:.4} mode_cov {}",
                    row.lambda,
                    row.fidelity_reward,
                    row.metrics.mode_cov.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
                ));
            }
        }
    }
    Ok(())
}

/// Prints a line, ignoring a closed stdout.
fn say(args: std::fmt::Arguments<'_>) {
    let _ = writeln!(std::io::stdout(), "{args}");
}

fn print_metrics(report: &runner::Report) {
    let m = &report.metrics;
    for (name, v) in [("frechet", m.frechet), ("tv", m.tv), ("mode_cov", m.mode_cov), ("avg_nll", m.avg_nll)] {
        if let Some(v) = v {
            say(format_args!("{name} {v:.6}"));
        }
    }
    for note in &m.notes {
        say(format_args!("note: {note}"));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

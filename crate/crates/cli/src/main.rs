use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use craft::config::RunConfig;
use craft::curation::{FilterRule, SelectionStrategy};
use craft::pipeline::{Command, Runner};

/// Composite-reward filtering and advantage-weighted fine-tuning of a toy
/// conditional diffusion model.
#[derive(Debug, Parser)]
#[command(name = "craft", version)]
struct Cli {
    #[command(subcommand)]
    stage: Stage,

    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Filter rule: h, p, a, ha, pa or hpa.
    #[arg(long, global = true)]
    rule: Option<FilterRule>,

    /// Selection strategy: top:K, random:K, low:K or all.
    #[arg(long, global = true)]
    strategy: Option<SelectionStrategy>,

    /// Fine-tuning steps.
    #[arg(long, global = true, value_name = "N")]
    steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Stage {
    /// Pretrain the base model, then generate and score the candidate pool.
    GenData,
    /// Apply the filter rule to the pool.
    Filter,
    /// Select the training set from the filtered pool.
    Select,
    /// Fine-tune the base model on the selected set.
    Train,
    /// Compare base and fine-tuned models on held-out prompts.
    Eval,
    /// Run the gradient, Taylor, zero-sum and ELBO checks.
    Verify,
    /// Run the selection, reward-combination and SFT ablation grids.
    Ablate,
    /// Run every stage except the ablations.
    All,
}

impl From<Stage> for Command {
    fn from(s: Stage) -> Self {
        match s {
            Stage::GenData => Command::GenData,
            Stage::Filter => Command::Filter,
            Stage::Select => Command::Select,
            Stage::Train => Command::Train,
            Stage::Eval => Command::Eval,
            Stage::Verify => Command::Verify,
            Stage::Ablate => Command::Ablate,
            Stage::All => Command::All,
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.rule {
        cfg.curation.rule = r;
    }
    if let Some(s) = cli.strategy {
        cfg.curation.strategy = s;
    }
    if let Some(n) = cli.steps {
        cfg.training.total_steps = n;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let runner = Runner::new(cfg, &cli.out)?;
    runner.run(cli.stage.into())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

//! icae-lab: train, fine-tune, evaluate, and inspect context-compression
//! models at desk scale. Exit codes: 0 success, 1 runtime failure, 2 bad
//! configuration or missing inputs.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commands::{Common, EvalSuite, FinetuneMode, PolicyOverride};
use icae_core::error::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "icae-lab", version, about = "Context compression lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Sectioned key = value config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every stochastic component derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the manifest and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn common(&self, default_out: &str) -> Common {
        Common {
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
        }
    }
}

#[derive(Args, Default)]
struct PolicyArgs {
    /// Compression policy; overrides the [policy] config section.
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Length threshold in tokens (policy "threshold").
    #[arg(long)]
    tau: Option<usize>,
    /// Window size (policy "last_k").
    #[arg(long)]
    k: Option<usize>,
    /// Percentage of observations to compress (policy "random_pct").
    #[arg(long)]
    pct: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    None,
    Threshold,
    LastK,
    RandomPct,
}

impl PolicyKind {
    fn name(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::Threshold => "threshold",
            PolicyKind::LastK => "last_k",
            PolicyKind::RandomPct => "random_pct",
        }
    }
}

impl PolicyArgs {
    fn overrides(&self) -> PolicyOverride {
        PolicyOverride {
            policy: self.policy.map(|p| p.name().to_string()),
            tau: self.tau,
            k: self.k,
            pct: self.pct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Qa,
    Agentic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Qa,
    Rollout,
    Sweep,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the base language model, then the compression encoder.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fine-tune a pretrained checkpoint for QA or agentic decoding.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory dataset (JSONL); agentic mode generates tasks when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluation suites: per-record CSVs, summaries, Welch comparisons.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Independent evaluation runs; overrides [eval] runs.
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Roll episodes through the tool environment and record trajectories.
    Rollout {
        #[command(flatten)]
        common: CommonArgs,
        /// Decode actions from this checkpoint; scripted expert when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Policy x task-depth grid with scripted control rows.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Adds model-actor rows next to the scripted control rows.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seeds per cell; overrides [eval] runs.
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Compress text and report the reconstruction diff.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text to inspect; use --file for file input.
        #[arg(conflicts_with = "file", required_unless_present = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    // ICAE_LAB_THREADS caps the worker pool; unset or 0 leaves the default.
    if let Ok(v) = std::env::var("ICAE_LAB_THREADS") {
        match v.parse::<usize>() {
            Ok(n) => icae_core::par::configure_threads(n),
            Err(_) => eprintln!("warning: ignoring non-numeric ICAE_LAB_THREADS={v:?}"),
        }
    }
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Pretrain { common } => commands::cmd_pretrain(&common.common("runs/pretrain")),
        Cmd::Finetune { common, mode, checkpoint, data } => commands::cmd_finetune(
            &common.common("runs/finetune"),
            match mode {
                Mode::Qa => FinetuneMode::Qa,
                Mode::Agentic => FinetuneMode::Agentic,
            },
            checkpoint,
            data.as_deref(),
        ),
        Cmd::Eval { common, suite, checkpoint, runs, policy } => {
            let (suite, out) = match suite {
                Suite::Qa => (EvalSuite::Qa, "runs/eval-qa"),
                Suite::Rollout => (EvalSuite::Rollout, "runs/eval-rollout"),
                Suite::Sweep => (EvalSuite::Sweep, "runs/eval-sweep"),
            };
            commands::cmd_eval(
                &common.common(out),
                suite,
                checkpoint.as_deref(),
                *runs,
                &policy.overrides(),
            )
        }
        Cmd::Rollout { common, checkpoint, policy } => commands::cmd_rollout(
            &common.common("runs/rollout"),
            checkpoint.as_deref(),
            &policy.overrides(),
        ),
        Cmd::Sweep { common, checkpoint, runs, policy } => commands::cmd_sweep(
            &common.common("runs/sweep"),
            checkpoint.as_deref(),
            *runs,
            &policy.overrides(),
        ),
        Cmd::Inspect { config, checkpoint, text, file, out } => {
            let loaded;
            let body = match (text, file) {
                (Some(t), None) => t.as_str(),
                (None, Some(f)) => match std::fs::read_to_string(f) {
                    Ok(s) => {
                        loaded = s;
                        loaded.as_str()
                    }
                    Err(e) => {
                        eprintln!("error: cannot read {}: {e}", f.display());
                        std::process::exit(2);
                    }
                },
                _ => unreachable!("clap enforces exactly one of text/--file"),
            };
            commands::cmd_inspect(
                config.as_deref(),
                checkpoint,
                body,
                file.as_deref(),
                out.as_deref().unwrap_or_else(|| std::path::Path::new("runs/inspect")),
            )
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Config(_) | Error::Parse { .. } => 2,
            _ => 1,
        });
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use seqlab_cli::commands;
use seqlab_cli::config::{Overrides, RunConfig};
use seqlab_cli::grid::{run_grid, GridConfig};

/// Desk-scale sequence-to-sequence training laboratory.
#[derive(Parser)]
#[command(name = "seqlab", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Cmd {
    /// Train a model; writes checkpoints, vocab files and a JSONL log.
    Train {
        /// TOML run configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Frozen teacher checkpoint for the attention-forcing regimes.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Run at most this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Translate a text file, one sentence per line, in free running mode.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Sample instead of beam search, deterministically per seed.
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Optional per-line, per-step entropy sidecar file.
        #[arg(long)]
        entropy_out: Option<PathBuf>,
        /// Decode-length cap (default: 2 * source length + 10).
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of a hypotheses file against a references file.
    Evaluate {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Diversity probe: M seeded sampling runs (pairwise BLEU) plus one
    /// deterministic beam run (mean entropy).
    Diversity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of sampling runs; defaults to the config's m_samples (5).
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Run a (task, regime, k, seed) experiment grid of seqlab processes.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the grid's parallelism bound.
        #[arg(long)]
        parallel: Option<usize>,
    },
}

fn load_run_config(path: &Option<PathBuf>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn run() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Train { config, out, resume, teacher, stop_after, overrides } => {
            let cfg = load_run_config(&config, &overrides)?;
            commands::cmd_train(&cfg, &out, resume.as_deref(), teacher.as_deref(), stop_after)?;
            Ok(true)
        }
        Cmd::Translate { checkpoint, input, output, beam, sample_seed, entropy_out, max_len } => {
            commands::cmd_translate(
                &checkpoint,
                &input,
                &output,
                beam,
                sample_seed,
                entropy_out.as_deref(),
                max_len,
            )?;
            Ok(true)
        }
        Cmd::Evaluate { hypotheses, references, json_out } => {
            commands::cmd_evaluate(&hypotheses, &references, json_out.as_deref())?;
            Ok(true)
        }
        Cmd::Diversity { checkpoint, input, out, m, config, seed, beam, max_len } => {
            let m = match (m, &config) {
                (Some(m), _) => m,
                (None, Some(p)) => RunConfig::load(p)?.eval.m_samples,
                (None, None) => RunConfig::default().eval.m_samples,
            };
            commands::cmd_diversity(&checkpoint, &input, &out, m, seed, beam, max_len)?;
            Ok(true)
        }
        Cmd::Grid { config, out, parallel } => {
            let mut cfg = GridConfig::load(&config)?;
            if let Some(p) = parallel {
                cfg.parallel = p;
            }
            let exe = std::env::current_exe()?;
            run_grid(&cfg, &out, &exe)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

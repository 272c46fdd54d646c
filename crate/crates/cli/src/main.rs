//! `asr`: training, fusion, verification and diagnostics for attention-alike
//! structural re-parameterization. Every command that writes files creates a
//! fresh run directory and prints `run_dir=<path>`.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use commands::{Axis, ChainShape};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "asr", version, about = "Attention-alike structural re-parameterization experiments")]
struct Cli {
    /// Root for run directories; defaults to $ASR_OUTPUT_ROOT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.ini, metrics.csv, model.ckpt and optional stripe records.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. `--set train.epochs=3`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Fold every constant attention slot into its neighbouring layer.
    Fuse {
        checkpoint: PathBuf,
        /// Where to write the fused checkpoint; defaults to the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare two checkpoints on seeded random inputs; exits non-zero when they differ.
    Verify {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = asr_core::fusion::VERIFY_SAMPLES)]
        n: usize,
        #[arg(long, default_value_t = asr_core::fusion::FUSION_TOL)]
        tol: f64,
        #[arg(long, default_value_t = asr_core::fusion::VERIFY_SEED)]
        seed: u64,
    },
    /// Summarize stripe records (a CSV file or a train run directory).
    Stripe {
        records: PathBuf,
        #[arg(long, default_value_t = asr_core::analysis::stripe::DEFAULT_CONVERGENCE_THRESHOLD)]
        threshold: f64,
    },
    /// Trace perturbation growth through residual chains.
    Perturb {
        /// A residual-chain checkpoint; random chains are drawn per trial when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 1e-2, 1e-1])]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        /// Standard deviation of the frozen Gaussian psi of random chains.
        #[arg(long, default_value_t = 1.0)]
        psi_std: f64,
    },
    /// Evaluate models with batch-norm noise injected.
    Noise {
        /// `label=path` or a bare checkpoint path; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// `const:a,b` or `rand:sa,sb`; repeatable. Defaults to the standard table rows.
        #[arg(long = "spec")]
        specs: Vec<String>,
        #[arg(long, default_value_t = commands::DEFAULT_NOISE_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the evaluation set from this config instead of the first checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter count, MACs and throughput of baseline, unfused and fused models.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        iters: usize,
    },
    /// Sweep one ablation axis over a base config.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn run(cli: Cli) -> error::Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Train { config, sets } => commands::train_cmd(config.as_deref(), &sets, out),
        Command::Fuse { checkpoint, output } => commands::fuse_cmd(&checkpoint, output.as_deref(), out),
        Command::Verify { a, b, n, tol, seed } => commands::verify_cmd(&a, &b, n, tol, seed),
        Command::Stripe { records, threshold } => commands::stripe_cmd(&records, threshold, out),
        Command::Perturb {
            checkpoint,
            eps,
            trials,
            seed,
            depth,
            width,
            psi_std,
        } => {
            let chain = ChainShape { depth, width, psi_std };
            commands::perturb_cmd(checkpoint.as_deref(), &chain, &eps, trials, seed, out)
        }
        Command::Noise {
            models,
            specs,
            repeats,
            seed,
            config,
        } => commands::noise_cmd(&models, &specs, repeats, seed, config.as_deref(), out),
        Command::Bench {
            checkpoint,
            batch,
            warmup,
            iters,
        } => commands::bench_cmd(&checkpoint, batch, warmup, iters, out),
        Command::Ablate { axis, config, sets } => commands::ablate_cmd(axis, config.as_deref(), &sets, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            let msg = first.trim_start_matches("error: ").replace('"', "\\\"");
            eprintln!("error: kind=usage msg=\"{msg}\"");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}

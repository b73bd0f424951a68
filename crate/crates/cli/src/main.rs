//! `cosmo`: dataset splitting, training, evaluation, baselines and export.
//!
//! Exit codes: 0 on success, 2 for invalid input, 1 for failures while running.

mod backend;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use backend::BackendKind;

#[derive(Parser)]
#[command(name = "cosmo", version, about = "Source-guided prompt learning for open-set multi-target adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Frozen encoder pair.
    #[arg(long, value_enum, default_value_t = BackendKind::Toy)]
    backend: BackendKind,
    /// CLIP checkpoint: a `.safetensors` file, its directory, or a registry name.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalPool {
    /// Every split class in the target domains.
    Targets,
    /// Known classes in the source domain; UNK is undefined there.
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    ZeroShot,
}

#[derive(Subcommand)]
enum Command {
    /// Write an open-set split file and print per-domain sample counts.
    Split {
        /// Dataset root (`domain/class/image` tree or `manifest.tsv`).
        #[arg(long)]
        dataset: PathBuf,
        /// Number of known classes, taken in lexicographic order.
        #[arg(long)]
        n_known: usize,
        #[arg(long)]
        source: String,
        /// Comma-separated target domains.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the dataset name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic feature-cache dataset for the toy backend.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        known: usize,
        #[arg(long, default_value_t = 3)]
        unknown: usize,
        #[arg(long, default_value_t = 2)]
        domains: usize,
        /// Feature and token width of the toy backend.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 40)]
        source_per_class: usize,
        #[arg(long, default_value_t = 30)]
        target_per_class: usize,
        #[arg(long, default_value_t = 30)]
        heldout_per_class: usize,
    },
    /// Encode every image of a dataset into a feature cache.
    Cache {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Defaults to `<dataset>/features`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train prompts and the bias network into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations without a final checkpoint.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Report OS*, UNK, HOS and OS for a trained run or the zero-shot baseline.
    Eval {
        /// Run directory (or checkpoint directory) to evaluate.
        #[arg(long, required_unless_present = "baseline")]
        run: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum, default_value_t = EvalPool::Targets)]
        pool: EvalPool,
        /// Evaluate records from this root instead of the split's dataset root.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "run")]
        baseline: Option<Baseline>,
        /// Known-class probability below which the baseline predicts unknown.
        #[arg(long, default_value_t = cosmo::eval::BASELINE_THRESHOLD)]
        threshold: f64,
        /// Baseline config (temperature); trained runs use their own.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `metrics_<pool>.json`; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trainable parameter counts.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        feature_dim: usize,
        #[arg(long, default_value_t = 512)]
        token_dim: usize,
    },
    /// Export text and image embeddings of a trained run.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum, default_value_t = EvalPool::Targets)]
        pool: EvalPool,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> cosmo::Result<()> {
    match cli.command {
        Command::Split {
            dataset,
            n_known,
            source,
            targets,
            seed,
            name,
            out,
        } => commands::split(&dataset, n_known, &source, &targets, seed, name, &out),
        Command::Synth {
            out,
            seed,
            known,
            unknown,
            domains,
            dim,
            source_per_class,
            target_per_class,
            heldout_per_class,
        } => commands::synth(
            &out,
            dim,
            cosmo::data::synthetic::SyntheticConfig {
                known_classes: known,
                unknown_classes: unknown,
                target_domains: domains,
                source_per_class,
                target_per_class,
                heldout_per_class,
                seed,
                ..Default::default()
            },
        ),
        Command::Cache { dataset, backend, out } => commands::cache(&dataset, &backend, out),
        Command::Train {
            config,
            split,
            backend,
            seed,
            out,
            resume,
            halt_after,
        } => commands::train(commands::TrainArgs {
            config,
            split,
            backend,
            seed,
            out,
            resume,
            halt_after,
        }),
        Command::Eval {
            run,
            split,
            backend,
            pool,
            dataset,
            baseline,
            threshold,
            config,
            out,
        } => match (baseline, run) {
            (Some(Baseline::ZeroShot), _) => commands::baseline(&split, &backend, pool, dataset, threshold, config, out),
            (None, Some(run)) => commands::eval(&run, &split, &backend, pool, dataset, out),
            (None, None) => Err(cosmo::Error::Validation("eval needs --run or --baseline".into())),
        },
        Command::Params {
            config,
            feature_dim,
            token_dim,
        } => commands::params(config, feature_dim, token_dim),
        Command::Export {
            run,
            split,
            backend,
            pool,
            dataset,
            out,
        } => commands::export(&run, &split, &backend, pool, dataset, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

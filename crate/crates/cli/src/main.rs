//! `weaver`: ingest, fit, select, evaluate and fit scaling curves from the shell.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weaver_core::clustering::ThresholdMode;
use weaver_core::{CurveForm, DataFormat, Error};

#[derive(Parser, Debug)]
#[command(name = "weaver", version, about = "Weak-verifier ensembling for best-of-K selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset file (JSONL or CSV).
    #[arg(long)]
    data: PathBuf,
    /// Overrides the format guessed from the extension.
    #[arg(long)]
    format: Option<DataFormat>,
    /// Verifier manifest; defaults to `<data>.verifiers.json` when present.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// TOML or JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    /// Fixed class prior instead of the dev estimate.
    #[arg(long)]
    prior: Option<f64>,
    /// fixed | dev_adaptive | class_balance | quantile
    #[arg(long)]
    binarization: Option<String>,
    /// Threshold for `fixed`, quantile level for `quantile`.
    #[arg(long)]
    threshold: Option<f64>,
    /// Keep verifiers regardless of their positive-vote rate.
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    lo_percentile: Option<f64>,
    #[arg(long)]
    hi_percentile: Option<f64>,
    /// heuristic | majority_seeded
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Number of difficulty clusters.
    #[arg(long)]
    clusters: Option<usize>,
    /// global | per_cluster | per_model
    #[arg(long)]
    threshold_mode: Option<ThresholdMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate a dataset, then write a report.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate verifier accuracies and write a fit artifact.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick one response per query with a fit artifact.
    Select {
        #[command(flatten)]
        data: DataArgs,
        /// Fit artifact from `weaver fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage, success rates and per-verifier diagnostics.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated: weaver, oracle, first, majority, naive, topN, naive_bayes, logreg.
        #[arg(long)]
        strategies: Option<String>,
        /// Comma-separated sample budgets for Pass@k (and best-of-k with --trials).
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// Leave dev queries out of every metric.
        #[arg(long)]
        exclude_dev: bool,
        /// Also score a selection file written by `weaver select`.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Flat CSV copy of the report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit a coverage or selection curve to `k,value[,stderr]` points.
    ScalingFit {
        #[arg(long)]
        input: PathBuf,
        /// coverage | selection
        #[arg(long, default_value = "selection")]
        form: CurveForm,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generating parameters; defaults to `truth.json` next to the data.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        format: Option<DataFormat>,
    },
    /// Write per-response posteriors as distillation targets (JSONL).
    ExportDistill {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("WEAVER_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("WEAVER_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::InvalidArgument("WEAVER_THREADS must be positive".into()));
        }
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::Ingest { data, out } => commands::ingest(&data, out.as_deref()),
        Command::Fit { data, run, out } => commands::fit(&data, &run, out.as_deref()),
        Command::Select { data, fit, out } => commands::select(&data, &fit, out.as_deref()),
        Command::Eval {
            data,
            run,
            strategies,
            k,
            trials,
            exclude_dev,
            selection,
            out,
            csv,
        } => commands::eval(
            &data,
            &run,
            commands::EvalFlags {
                strategies,
                k,
                trials,
                exclude_dev,
                selection,
            },
            out.as_deref(),
            csv.as_deref(),
        ),
        Command::ScalingFit { input, form, out } => commands::scaling_fit(&input, form, out.as_deref()),
        Command::Synth {
            spec,
            out,
            truth,
            format,
        } => commands::synth(&spec, &out, truth.as_deref(), format),
        Command::ExportDistill { data, fit, out } => commands::export_distill(&data, &fit, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{payload}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

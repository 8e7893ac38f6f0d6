//! `elmlab` command-line interface.
//!
//! Exit status is 0 on success, 1 when an input or config is rejected and 2
//! when a verification suite reports a violation.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod fmt;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{EvalArgs, Outcome};
use config::SyntheticSource;
use elmlab::data::ProfileKind;
use elmlab::{ClassCounts, Execution, LossVariant, ScaleConvention};

#[derive(Parser)]
#[command(
    name = "elmlab",
    version,
    about = "Margin losses for class-imbalanced classification"
)]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Longtail,
    Step,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    AllLogits,
    PrintedLiteral,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Ce,
    Ldam,
    Elm,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an imbalanced Gaussian-blob dataset and its counts manifest.
    GenData {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        nmax: usize,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        /// Rows per class in a balanced test.csv; 0 skips it.
        #[arg(long, default_value_t = 0)]
        test_per_class: usize,
        /// Directory receiving train.csv, test.csv and counts.json.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one model per seed from a JSON experiment config.
    Train { config: PathBuf },
    /// Evaluate a saved model on a labelled CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        has_header: bool,
        /// Training counts manifest; enables frequent/rare group metrics.
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Write the full summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare each loss against its softplus form on random inputs.
    CheckEquivalence {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `printed-literal` scales only the target logit and reports the
        /// resulting mismatch without enforcing it.
        #[arg(long, value_enum, default_value = "all-logits")]
        scale_convention: ConventionArg,
    },
    /// Finite-difference audit of analytic gradients.
    CheckGradients {
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Print literal and normalized per-class margins.
    Margins {
        /// Comma-separated class counts.
        #[arg(
            long,
            value_delimiter = ',',
            required_unless_present = "manifest",
            conflicts_with = "manifest"
        )]
        counts: Vec<usize>,
        /// counts.json written by gen-data.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = elmlab::losses::DEFAULT_MAX_MARGIN)]
        max_margin: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::GenData {
            kind,
            classes,
            nmax,
            ratio,
            seed,
            dims,
            separation,
            std,
            test_per_class,
            out,
        } => {
            let source = SyntheticSource {
                kind: match kind {
                    KindArg::Longtail => ProfileKind::Longtail,
                    KindArg::Step => ProfileKind::Step,
                },
                classes,
                n_max: nmax,
                ratio,
                dims,
                separation,
                std,
                test_per_class,
                seed,
            };
            commands::gen_data(&source, &out)
        }
        Command::Train { config } => commands::train(&config, exec),
        Command::Eval {
            model,
            data,
            has_header,
            counts,
            out,
        } => commands::eval(
            &EvalArgs {
                model: &model,
                data: &data,
                has_header,
                counts: counts.as_deref(),
                out: out.as_deref(),
            },
            exec,
        ),
        Command::CheckEquivalence {
            trials,
            seed,
            scale_convention,
        } => {
            let convention = match scale_convention {
                ConventionArg::AllLogits => ScaleConvention::AllLogits,
                ConventionArg::PrintedLiteral => ScaleConvention::PrintedLiteral,
            };
            commands::check_equivalence_cmd(trials, seed, convention, exec)
        }
        Command::CheckGradients {
            variant,
            trials,
            seed,
            h,
        } => {
            let variant = match variant {
                VariantArg::Ce => Some(LossVariant::Ce),
                VariantArg::Ldam => Some(LossVariant::Ldam),
                VariantArg::Elm => Some(LossVariant::Elm),
                VariantArg::All => None,
            };
            commands::check_gradients_cmd(variant, trials, seed, h, exec)
        }
        Command::Margins {
            counts,
            manifest,
            max_margin,
        } => {
            let counts = match manifest {
                Some(path) => commands::read_manifest_counts(&path)?,
                None => ClassCounts::new(counts)?,
            };
            commands::margins(&counts, max_margin)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::SuiteFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

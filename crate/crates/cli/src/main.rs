//! `varblock`: calibrate per-head block sizes, decode with them, ablate
//! centroid quantization and benchmark the batched kernels.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "varblock",
    version,
    about = "Block-sparse decoding with per-head block sizes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Workload seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Recall retention threshold.
    #[arg(long, global = true, value_name = "FLOAT")]
    pub tau: Option<f64>,
    /// Tokens each head may attend to.
    #[arg(long, global = true, value_name = "TOKENS")]
    pub budget: Option<usize>,
    /// Centroid quantization: none, or int{2,4,8} x {sym,asym}, e.g. int4xasym.
    #[arg(long, global = true, value_name = "SPEC")]
    pub quant: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile recall per block size and write the per-head assignment.
    Calibrate {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Decode the tail of a trace and report per-step recall and error.
    Decode {
        /// Assignment file or `uniform:B`; repeat to compare side by side.
        #[arg(long, value_name = "PATH|uniform:B", required = true)]
        assignment: Vec<String>,
        /// Trace file; generated from the configuration when absent.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// CSV report path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Top-K page recall of every quantization spec against full precision.
    AblateQuant {
        /// Assignment file or `uniform:B`; defaults to the finest candidate.
        #[arg(long, value_name = "PATH|uniform:B")]
        assignment: Option<String>,
        /// Trace file whose final query is used; generated samples otherwise.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// CSV report path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Check batched kernels against their baselines, then time both.
    Bench {
        /// CSV report path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Write a synthetic trace.
    Generate {
        /// Trace output path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = settings::Settings::load(cli.common.config.as_deref())
        .and_then(|base| commands::apply_overrides(base, &cli.common))
        .and_then(|settings| match cli.command {
            Command::Calibrate { out } => commands::calibrate(&settings, &out),
            Command::Decode {
                assignment,
                trace,
                out,
            } => commands::decode(&settings, &assignment, trace.as_deref(), &out),
            Command::AblateQuant {
                assignment,
                trace,
                out,
            } => commands::ablate_quant(
                &settings,
                cli.common.quant.as_deref(),
                assignment.as_deref(),
                trace.as_deref(),
                &out,
            ),
            Command::Bench { out } => commands::bench(&settings, &out),
            Command::Generate { out } => commands::generate(&settings, &out),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<commands::GateFailure>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

//! `conda`: simulate shifted data, fit a source concept bottleneck model,
//! adapt it on a target stream, and inspect the results.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conda_core::CondaError;

#[derive(Parser, Debug)]
#[command(name = "conda", version, about = "Test-time adaptation of concept bottleneck models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// key = value configuration file; absent keys take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shift scenario with ground truth
    Simulate {
        /// Scenario configuration (scenario.* keys)
        #[arg(long, alias = "config")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the source head and class statistics
    FitSource {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// JSON array of concept captions
        #[arg(long)]
        captions: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a fitted model over a target stream
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        target_emb: PathBuf,
        #[arg(long)]
        zs_logits: PathBuf,
        #[arg(long)]
        lp_logits: PathBuf,
        /// True target labels; enables the evaluation report
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class accuracy of a model on labeled features
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption bank and residual concepts from an image-text similarity matrix
    Annotate {
        #[arg(long)]
        model: PathBuf,
        /// Target features the similarity matrix was computed on
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        simmat: PathBuf,
        /// JSON array of caption strings, one per similarity column
        #[arg(long)]
        captions: PathBuf,
        /// Overrides annotate_threshold from the configuration
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of every analytic gradient
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt the configured scenario at every point of a parameter grid
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// key=v1,v2,...; repeat for a cartesian product
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<CondaError>().map(CondaError::code))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("cli")
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CONDA_ADAPT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CondaError::InvalidInput(format!("CONDA_ADAPT_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { spec, out } => commands::simulate(spec.as_deref(), &out),
        Command::FitSource {
            emb,
            labels,
            bank,
            captions,
            config,
            out,
        } => commands::fit_source(&emb, &labels, &bank, captions.as_deref(), &config, &out),
        Command::Adapt {
            model,
            stats,
            target_emb,
            zs_logits,
            lp_logits,
            labels,
            config,
            out,
        } => commands::adapt(
            &commands::AdaptInputs {
                model,
                stats,
                target_emb,
                zs_logits,
                lp_logits,
                labels,
            },
            &config,
            &out,
        ),
        Command::Evaluate {
            model,
            emb,
            labels,
            config,
            out,
        } => commands::evaluate(&model, &emb, &labels, &config, out.as_deref()),
        Command::Annotate {
            model,
            emb,
            simmat,
            captions,
            threshold,
            config,
            out,
        } => commands::annotate(&model, &emb, &simmat, &captions, threshold, &config, out.as_deref()),
        Command::Gradcheck {
            seeds,
            first_seed,
            config,
            out,
        } => commands::gradcheck(first_seed, seeds, &config, out.as_deref()),
        Command::Sweep { config, grid, out } => commands::sweep(&config, &grid, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "code": error_code(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

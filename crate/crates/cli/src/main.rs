mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vptq", version, about = "Hessian-guided vector quantization of weight matrices")]
struct Cli {
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a damped proxy Hessian from calibration activations (each N×samples).
    Hessian {
        #[arg(long, num_args = 1.., required = true)]
        activations: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Diagonal damping as a fraction of the mean diagonal.
        #[arg(long)]
        damping: Option<f64>,
        /// Quantization config; only `damping_fraction` is read.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quantize one weight matrix into a `.vptq` container.
    Quantize {
        #[arg(long)]
        weight: PathBuf,
        #[arg(long)]
        hessian: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and `VPTQ_SEED`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild the weight matrix from a container.
    Dequantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a container against the original weights.
    Eval {
        #[arg(long)]
        weight: PathBuf,
        #[arg(long)]
        quantized: PathBuf,
        /// Any N×N Hessian, e.g. one from held-out calibration data.
        #[arg(long)]
        hessian: Option<PathBuf>,
    },
    /// Compression accounting for declared shapes, without touching weights.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON array of `{"name", "rows", "cols"}`.
        #[arg(long)]
        shapes: PathBuf,
        /// Count one bit per codebook entry instead of sixteen.
        #[arg(long)]
        no_codebook_dtype_factor: bool,
    },
    /// Quantize every entry of a manifest, one container per entry.
    QuantizeModel {
        /// JSON array of `{"name", "weight", "hessian"}`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Hessian {
            activations,
            out,
            damping,
            config,
        } => commands::hessian(&activations, &out, damping, config.as_deref(), cli.verbose),
        Command::Quantize {
            weight,
            hessian,
            config,
            out,
            seed,
        } => commands::quantize(&weight, &hessian, config.as_deref(), &out, seed, cli.verbose),
        Command::Dequantize { input, out } => commands::dequantize(&input, &out),
        Command::Eval {
            weight,
            quantized,
            hessian,
        } => commands::eval(&weight, &quantized, hessian.as_deref()),
        Command::Report {
            config,
            shapes,
            no_codebook_dtype_factor,
        } => commands::report(config.as_deref(), &shapes, !no_codebook_dtype_factor),
        Command::QuantizeModel {
            manifest,
            config,
            out_dir,
            workers,
            seed,
        } => commands::quantize_model(&manifest, config.as_deref(), &out_dir, workers, seed, cli.verbose),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

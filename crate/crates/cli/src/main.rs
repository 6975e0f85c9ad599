mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commvq::Error;

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(
    name = "commvq",
    version,
    about = "Commutative vector quantization lab for KV caches"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration overlaid on the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving artifacts and reports.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Comma-separated cache lengths for bench-attn.
    #[arg(long, global = true, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    /// Worker threads (work is currently run on one thread).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Seeded low-rank synthetic calibration data.
    GenSynth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        rank: usize,
        /// Use the latent directly (requires rank == d).
        #[arg(long)]
        no_mixing: bool,
    },
    /// Train a commutative key codebook.
    TrainKey {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a value encoder and codebook.
    TrainValue {
        #[arg(long)]
        input: PathBuf,
    },
    /// Encode key/value streams into a packed cache snapshot.
    Quantize {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        values: PathBuf,
        #[arg(long)]
        key_codebook: PathBuf,
        #[arg(long)]
        value_quantizer: PathBuf,
    },
    /// Decode a cache snapshot back to tensors.
    Reconstruct {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        key_codebook: PathBuf,
        #[arg(long)]
        value_quantizer: PathBuf,
    },
    /// Reconstruction MSE of quantizers and asymmetric baselines.
    MseReport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        bits: Vec<u32>,
        #[arg(long)]
        value_quantizer: Option<PathBuf>,
        #[arg(long)]
        key_codebook: Option<PathBuf>,
    },
    /// Multiply counts of naive vs fused attention.
    BenchAttn {
        #[arg(long, default_value_t = 128)]
        d: usize,
    },
    /// Storage footprint of a configuration.
    SizeReport {
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 131_072)]
        tokens: usize,
    },
    /// Key-quantizer sweeps over g, R or N_c'.
    Ablate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[arg(long, default_value_t = 11)]
        max_rounds: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Sweep {
    G,
    Rounds,
    Levels,
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::InvalidInput(_) => (2, "invalid_input"),
        Error::Io(_) => (3, "io"),
        Error::Training(_) | Error::Diverged { .. } => (4, "training"),
        Error::Corrupt(_) => (5, "corrupt"),
    }
}

fn emit_error(kind: &str, code: u8, message: String) -> ExitCode {
    let obj = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{obj}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return emit_error("usage", 2, e.to_string().trim_end().to_string()),
    };
    match commands::run(&cli.global, cli.command) {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = exit_code(&e);
            emit_error(kind, code, e.to_string())
        }
    }
}

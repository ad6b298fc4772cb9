mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "metalora", version, about = "Desk-scale Meta-LoRA lab on a toy conditional denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output path; the run trace goes next to it as `<out>.trace.jsonl`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub(crate) enum Command {
    /// Write the toy identity dataset as JSON.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and freeze the base denoiser on the training identities.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset JSON from `gen-data`; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage 1: meta-train the shared down factors.
    Metatrain {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage 2: fit mid/up factors for one identity from its reference sample.
    Personalize {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Identity to personalize; defaults to the first held-out identity.
        #[arg(long)]
        identity: Option<u32>,
    },
    /// Collapse a personalized checkpoint into a two-factor export.
    Merge {
        #[command(flatten)]
        common: Common,
        /// Personalized checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Check the export against the three-factor forward pass (needs `--base`).
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Score R-FaceSim, FaceSim and their relative difference from an embedding exchange file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON lines `{"id", "vector"}` covering references, tests and `gen/<identity>/<prompt>` items.
        #[arg(long)]
        embeddings: PathBuf,
        /// Optional joint text/image embeddings (`prompt/<prompt>` and generated keys) for prompt adherence.
        #[arg(long)]
        joint: Option<PathBuf>,
        /// Score the reference itself as every generation.
        #[arg(long)]
        copy_reference: bool,
    },
    /// Emit the crop plan (and optional sampled views) as JSON lines.
    AugmentPlan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        /// Face box as `x,y,w,h`.
        #[arg(long)]
        face: String,
        /// Number of sampled views to append after the plan.
        #[arg(long, default_value_t = 0)]
        draws: usize,
    },
    /// Compare adaptation speed with meta-trained and random down factors.
    SpeedExperiment {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("{}", commands::error_record(&e, code));
            ExitCode::from(code)
        }
    }
}

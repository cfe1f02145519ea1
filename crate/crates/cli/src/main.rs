//! `zoomstack`: generate, ground, ablate and render zoom stacks.

mod backend;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zoomstack::Error;

use backend::Backend;
use commands::{Ablation, Globals};

const DEFAULT_FRAMES: usize = 48;

#[derive(Parser)]
#[command(name = "zoomstack", version, about = "Multi-scale zoom stacks from joint diffusion sampling")]
struct Cli {
    /// Override the scene's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// builtin-oracle, builtin-gaussian, builtin-echo, remote:ADDR or subprocess:CMD.
    #[arg(long, global = true, default_value = "builtin-oracle")]
    backend: String,

    /// Write the per-step sampling trace here as JSON lines.
    #[arg(long, global = true)]
    log: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a zoom stack and write it with level renders and frames.
    Generate {
        spec: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        /// Dump per-band blending contributions of the last step as PNGs.
        #[arg(long)]
        dump_bands: Option<PathBuf>,
    },
    /// Sample a stack whose outermost view matches a photograph.
    Ground {
        spec: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
    },
    /// Sample with one component of the method disabled.
    Ablate {
        spec: PathBuf,
        #[arg(long, value_enum)]
        mode: Ablation,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        /// Also run the full method and report per-level differences.
        #[arg(long)]
        compare: bool,
    },
    /// Render a zoom video frame sequence from a stack file.
    Render {
        stack: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property suites.
    Verify,
    /// Connect to a denoiser endpoint and check the handshake.
    ServeCheck { endpoint: String },
    /// Host a built-in backend over the wire protocol (stdio unless --listen).
    Serve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        listen: Option<String>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Protocol(_) | Error::Backend(_) => 2,
        Error::Invariant(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> zoomstack::Result<()> {
    let globals = Globals {
        seed: cli.seed,
        backend: cli.backend.parse::<Backend>()?,
        log: cli.log,
    };
    match cli.command {
        Command::Generate {
            spec,
            frames,
            dump_bands,
        } => commands::generate(&spec, frames, dump_bands.as_deref(), &globals),
        Command::Ground {
            spec,
            image,
            frames,
        } => commands::ground(&spec, &image, frames, &globals),
        Command::Ablate {
            spec,
            mode,
            frames,
            compare,
        } => commands::ablate(&spec, mode, frames, compare, &globals),
        Command::Render { stack, frames, out } => commands::render(&stack, frames, out.as_deref()),
        Command::Verify => commands::verify(),
        Command::ServeCheck { endpoint } => commands::serve_check(&endpoint),
        Command::Serve { spec, listen } => {
            commands::serve_builtin(&spec, listen.as_deref(), &globals)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zoomstack: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

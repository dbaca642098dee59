mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gsavatar_core::Error;

/// Overrides the worker thread count (default: one per core).
const THREADS_ENV: &str = "GSAVATAR_THREADS";

#[derive(Parser)]
#[command(name = "gsavatar", version, about = "Gaussian-splat avatar toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a splat cloud under one camera
    Render(commands::RenderArgs),
    /// Write a per-pixel ray embedding for a camera
    Raymap(commands::RaymapArgs),
    /// Merge four part clouds into one
    Compose(commands::ComposeArgs),
    /// Rebuild a composed cloud from its decision log
    Replay(commands::ReplayArgs),
    /// Run the joint sampling loop on a synthetic scene
    Simulate(commands::SimulateArgs),
}

/// Failure with the process exit code it maps to.
pub struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Guard(_) => 3,
            Error::Plugin(_) => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::internal(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Render(a) => commands::render(a),
        Command::Raymap(a) => commands::raymap(a),
        Command::Compose(a) => commands::compose(a),
        Command::Replay(a) => commands::replay(a),
        Command::Simulate(a) => commands::simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dhym_cli::{execute, Invocation, Mode, EXIT_PRECONDITION};

#[derive(Parser)]
#[command(name = "dhym", version, about = "Deformed Hermitian-Yang-Mills solvers on flat complex tori")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the numerical kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Continue a flow or ma run from a checkpoint.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Output directory, overriding [output] dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Z_L, θ̂, V and phase flags of the configured potential.
    Invariants,
    /// Run the randomized oracle battery.
    Verify,
    /// Line bundle mean curvature flow.
    Flow,
    /// Monge-Ampère route (n = 2).
    Ma,
    /// Stability margin of the class.
    Stability,
    /// Summarize a diagnostics CSV.
    Report,
}

impl From<Command> for Mode {
    fn from(c: Command) -> Mode {
        match c {
            Command::Invariants => Mode::Invariants,
            Command::Verify => Mode::Verify,
            Command::Flow => Mode::Flow,
            Command::Ma => Mode::Ma,
            Command::Stability => Mode::Stability,
            Command::Report => Mode::Report,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(EXIT_PRECONDITION as u8);
    };
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_PRECONDITION as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_PRECONDITION as u8);
        }
    }
    let inv = Invocation {
        config,
        mode: cli.command.map(Mode::from),
        resume: cli.resume,
        out: cli.out,
    };
    let stdout = std::io::stdout();
    match execute(&inv, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

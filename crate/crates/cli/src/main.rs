use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use gfm_cli::cli::{run, Cli};
use gfm_cli::util::exit_code;
use tracing::{error, info};

fn main() -> ExitCode {
    // clap prints usage and exits 2 on bad arguments, 0 for --help
    let cli = Cli::parse();
    gfm_cli::init_logging();
    let command = cli.command.name();
    let t = Instant::now();
    info!(event = "start", command);
    match run(cli) {
        Ok(()) => {
            info!(event = "done", command, seconds = t.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            error!(event = "failed", command, exit_code = code, error = format!("{e:#}"));
            eprintln!("gfm {command}: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}

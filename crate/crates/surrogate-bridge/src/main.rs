use clap::Parser;

use surrogate_bridge::cli::{run_command, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => {}
        Err(e @ CliError::Validation(_)) | Err(e @ CliError::Estimation(_)) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

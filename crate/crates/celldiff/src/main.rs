use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = celldiff::cli::Cli::parse();
    match celldiff::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

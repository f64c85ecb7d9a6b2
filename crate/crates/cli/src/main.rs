use clap::Parser;

use prefkit_cli::args::Cli;

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match prefkit_cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

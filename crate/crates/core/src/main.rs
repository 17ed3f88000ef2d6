use clap::Parser;
use shapecorr::cli::{run, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let payload = CliError { error: e.to_string(), exit_code: e.exit_code() };
        eprintln!("{}", serde_json::to_string(&payload).unwrap_or_else(|_| e.to_string()));
        std::process::exit(payload.exit_code);
    }
}

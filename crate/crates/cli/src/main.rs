use std::process::ExitCode;

use clap::Parser;
use dsmt_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsmt {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

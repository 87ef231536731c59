use std::process::ExitCode;

use cellfate_cli::{error_line, exit_code, run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(record) => {
            log::info!("{} artifacts recorded for {}", record.artifacts.len(), record.run_id);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}

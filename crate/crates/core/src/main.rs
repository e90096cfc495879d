use std::process::ExitCode;

use clap::Parser;

use fuseten::cli::{error_json, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSETEN_LOG", "info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(1)
        }
    }
}

use std::process::ExitCode;

use koalanet::{cli, Error};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match cli::run_from(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        // --help and --version
        Err(Error::Usage(msg)) if msg.is_empty() => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

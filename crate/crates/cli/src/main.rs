mod args;
mod commands;
mod error;

use clap::error::ErrorKind;
use clap::Parser;

use crate::error::{EXIT_OK, EXIT_USAGE};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let code = match args::Cli::try_parse() {
        Ok(cli) => match commands::run(cli) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            }
        }
    };
    std::process::exit(code);
}

use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::Parser;
use lw_cli::commands::{run, Cli};
use lw_cli::exit::{usage, Failure};

fn threads() -> Result<Option<usize>> {
    let Ok(value) = std::env::var("LW_THREADS") else {
        return Ok(None);
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(Some(n))
        }
        _ => Err(usage(format!("LW_THREADS must be a positive integer, got {value:?}"))),
    }
}

fn fail(err: &anyhow::Error) -> ExitCode {
    let f = Failure::classify(err);
    eprintln!("{}", f.line());
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(&usage(first.trim_start_matches("error: ")));
        }
    };
    let threads = match threads() {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    match run(cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

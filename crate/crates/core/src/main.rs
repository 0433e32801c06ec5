use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use sep_walk::cli::{run, Cli, CliError};

fn emit(cli: &Cli, payload: &str) -> Result<(), CliError> {
    match &cli.out {
        Some(path) => std::fs::write(path, payload).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        }),
        None => std::io::stdout()
            .write_all(payload.as_bytes())
            .map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SEP_WALK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match run(&cli).and_then(|o| emit(&cli, &o.payload).map(|_| o)) {
        Ok(outcome) => {
            eprint!("{}", outcome.summary);
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            println!("{}", e.to_json());
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

mod args;
mod commands;
mod config;
mod svg;

use std::process::ExitCode;

use args::Command;
use config::{resolve, ResolveError};

/// 1 for usage and input mistakes, 2 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<nielab::Error>())
        .any(nielab::Error::is_numeric);
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let resolved = match resolve(std::env::args_os().collect()) {
        Ok(r) => r,
        Err(ResolveError::Display(e)) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(ResolveError::Usage(msg)) => {
            eprintln!("{}", msg.trim_end());
            return ExitCode::from(1);
        }
    };
    let snap = &resolved.snapshot;
    let result = match &resolved.cli.command {
        Command::Generate(a) => commands::generate(a, snap),
        Command::Solve(a) => commands::solve(a, snap),
        Command::Train(a) => commands::train(a, snap),
        Command::Eval(a) => commands::eval(a, snap),
        Command::Bench(a) => commands::bench(a, snap),
        Command::AttnDump(a) => commands::attn_dump(a, snap),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

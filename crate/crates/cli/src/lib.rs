//! The `vseg` command line: phantom generation, training, inference,
//! evaluation and visualization.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod values;

use std::ffi::OsString;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use commands::Failure;

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// The full command definition, with environment fallbacks.
pub fn command() -> clap::Command {
    config::with_env(Cli::command()).mut_subcommands(|s| s.args_override_self(true))
}

/// Runs `vseg` on `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cmd = command();
    let argv_text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let expanded = match config::expand(argv, &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let matches = match cmd.clone().try_get_matches_from(expanded) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_INVALID;
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let recorder = manifest::Recorder::new(&cmd, &matches, &argv_text);
    let (result, out, is_dir) = match &cli.command {
        Command::Phantom(a) => (commands::phantom(a), &a.out, true),
        Command::Train(a) => (commands::train(a), &a.out, true),
        Command::Predict(a) => (commands::predict(a), &a.out, true),
        Command::Evaluate(a) => (commands::evaluate_cmd(a), &a.out, true),
        Command::Deform(a) => (commands::deform(a), &a.out, true),
        Command::Frangi(a) => (commands::frangi(a), &a.out, true),
        Command::Mip(a) => (commands::mip_cmd(a), &a.out, false),
    };
    match result {
        Ok(artifacts) => {
            let path = manifest::location(out, is_dir);
            if let Err(e) = recorder.finish(artifacts, &path) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_RUNTIME;
            }
            log::info!("{} finished; manifest at {}", cli.command.name(), path.display());
            0
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

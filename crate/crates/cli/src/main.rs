mod args;
mod commands;
mod engine;
mod error;
mod evaluate;
mod manifest;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::{CliError, EXIT_USAGE};

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            return Err(CliError {
                kind: "usage",
                message: e.render().to_string().trim().to_string(),
                exit_code: EXIT_USAGE,
            })
        }
    };
    let argv = argv[1..].to_vec();
    match cli.command {
        Command::Explain(a) => commands::explain(&a, argv),
        Command::Evaluate(a) => evaluate::evaluate(&a, argv, false),
        Command::Compare(a) => evaluate::evaluate(&a, argv, true),
        Command::GameDebug(a) => commands::game_debug(&a, argv),
        Command::Adapter(a) => commands::adapter(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::WriteToynet(a) => commands::write_toynet(&a),
        Command::Replay(a) => {
            let mut replayed = vec!["shapcam".to_string()];
            replayed.extend(manifest::replay_argv(&a.manifest)?);
            if let Some(dir) = &a.out_dir {
                replayed.push("--out-dir".into());
                replayed.push(dir.display().to_string());
            }
            run(replayed)
        }
    }
}

fn main() {
    if let Err(e) = run(std::env::args().collect()) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code);
    }
}

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use sciunit_cli::commands::{hint, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(reply) => {
            let printed = if cli.json && !reply.json.is_null() {
                writeln!(out, "{}", reply.json)
            } else if !reply.text.is_empty() {
                writeln!(out, "{}", reply.text)
            } else {
                Ok(())
            };
            if printed.is_err() {
                return ExitCode::from(4);
            }
            ExitCode::from(reply.exit_code as u8)
        }
        Err(e) => {
            let code = e.class().exit_code();
            if cli.json {
                let body = json!({ "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": code, "hint": hint(&e) } });
                eprintln!("{body}");
            } else {
                eprintln!("sciunit: {e}");
                if let Some(h) = hint(&e) {
                    eprintln!("hint: {h}");
                }
            }
            ExitCode::from(code as u8)
        }
    }
}

use std::process::ExitCode;

use rpt_cli::commands::{self, CmdError};
use rpt_cli::config::{RunConfig, SCHEMA};

const COMMANDS: &[(&str, &str)] = &[
    ("train", "train a model (writes checkpoints and a metric log)"),
    ("infer", "upscale one image with a trained checkpoint"),
    ("eval", "PSNR/L1 over a paired dataset (model or precomputed pred/)"),
    ("bench", "analytic vs instrumented cost, timings, attention k sweep"),
    ("attnmap", "export per-window attention mass on the dynamic tokens"),
    ("gradcheck", "finite-difference verification of every backward rule"),
];

fn usage() {
    use std::fmt::Write as _;
    let mut text = String::from("usage: rpt <command> [--config PATH] [--seed N] [--out DIR] [key=value ...]\n\n");
    text.push_str("commands:\n");
    for (name, help) in COMMANDS {
        let _ = writeln!(text, "  {name:<10} {help}");
    }
    text.push_str("\nconfig keys (key=value on the command line or `key = value` lines in --config):\n");
    for (key, help) in SCHEMA {
        let _ = writeln!(text, "  {key:<18} {help}");
    }
    text.push_str("\nexit codes: 0 success, 1 verification failure, 2 usage/input error\n");
    // Tolerate a closed pipe (e.g. `rpt help | head`).
    let _ = std::io::Write::write_all(&mut std::io::stdout(), text.as_bytes());
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        usage();
        return ExitCode::from(2);
    };
    if command == "help" || command == "--help" || command == "-h" {
        usage();
        return ExitCode::SUCCESS;
    }
    if !COMMANDS.iter().any(|(c, _)| c == command) {
        eprintln!("error: unknown command '{command}'");
        usage();
        return ExitCode::from(2);
    }
    let cfg = match RunConfig::from_args(command, &args[1..]) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match command.as_str() {
        "train" => commands::train::run(&cfg),
        "infer" => commands::infer::run(&cfg),
        "eval" => commands::eval::run(&cfg),
        "bench" => commands::bench::run(&cfg),
        "attnmap" => commands::attnmap::run(&cfg),
        "gradcheck" => commands::gradcheck::run(&cfg),
        _ => unreachable!("command list checked above"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CmdError::Usage(_)) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(2)
        }
        Err(e @ CmdError::Verify(_)) => {
            eprintln!("verification failure: {}", e.message());
            ExitCode::from(1)
        }
    }
}

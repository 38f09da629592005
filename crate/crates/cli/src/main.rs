use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use whyprompt_cli::{run, Cli};

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(buf, "level={} target={} {}", record.level().as_str().to_lowercase(), record.target(), record.args())
        })
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg.lines().take_while(|l| !l.starts_with("Usage:")).collect();
            eprintln!("ERROR: {}", one_line(head.join(" ").trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

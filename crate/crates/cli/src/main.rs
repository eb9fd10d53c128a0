mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use evtrack::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            msg: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Parse { .. } | Error::Validation(_) | Error::Shape { .. } | Error::Checkpoint(_) | Error::Io(_) => {
                EXIT_DATA
            }
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError {
            code: EXIT_DATA,
            msg: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

const USAGE: &str = "\
usage: evtrack <command> [--flag value]... [--section.key value]...

commands:
  gen-data   --out DIR                          synthetic dataset
  train      --data DIR --out DIR [--stage slow|fast] [--resume CKPT]
  finetune   --data DIR --out DIR --slow CKPT --fast CKPT [--resume CKPT]
  track      --data DIR --checkpoint CKPT --out DIR [--mode slow|fast] [--k K]
  eval       --data DIR --checkpoint CKPT --out DIR [--mode slow|fast] [--k K]
  bench      --data DIR --checkpoint CKPT [--k K] [--warmup N] [--sequence NAME] [--out FILE]
  gradcheck  [--entries N]
  params     [--scale desk|full]

every command accepts --config FILE, --seed N and --overwrite; other
--key value pairs override config entries (e.g. --train.epochs 3).
exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure";

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || matches!(argv[0].as_str(), "-h" | "--help" | "help") {
        println!("{USAGE}");
        return if argv.is_empty() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
    }
    match commands::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.code == EXIT_USAGE {
                eprintln!("run `evtrack --help` for usage");
            }
            ExitCode::from(e.code)
        }
    }
}

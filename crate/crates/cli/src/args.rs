//! `--key value` argument parsing. Flags a command knows are consumed here;
//! anything else is handed to the run configuration as an override.

use std::collections::BTreeMap;
use std::path::PathBuf;

use evtrack::config::RunConfig;

use crate::CliError;

/// Flags that take no value.
const SWITCHES: &[&str] = &["overwrite", "help"];

#[derive(Debug, Default)]
pub struct Args {
    pub command: String,
    flags: BTreeMap<String, String>,
    switches: Vec<String>,
    pub overrides: Vec<(String, String)>,
}

impl Args {
    /// Splits `argv` (without the program name). `known` lists the flags of
    /// the command; other `--key value` pairs become config overrides.
    pub fn parse(argv: &[String], known: impl Fn(&str) -> &'static [&'static str]) -> Result<Args, CliError> {
        let Some(command) = argv.first() else {
            return Err(CliError::usage("missing command"));
        };
        let allowed = known(command);
        let mut out = Args {
            command: command.clone(),
            ..Args::default()
        };
        let mut i = 1;
        while i < argv.len() {
            let a = &argv[i];
            let key = a
                .strip_prefix("--")
                .filter(|k| !k.is_empty())
                .ok_or_else(|| CliError::usage(format!("unexpected argument `{a}`")))?;
            let (key, inline) = match key.split_once('=') {
                Some((k, v)) => (k, Some(v.to_string())),
                None => (key, None),
            };
            if SWITCHES.contains(&key) {
                out.switches.push(key.to_string());
                i += 1;
                continue;
            }
            let value = match inline {
                Some(v) => v,
                None => {
                    i += 1;
                    argv.get(i)
                        .cloned()
                        .ok_or_else(|| CliError::usage(format!("flag `--{key}` needs a value")))?
                }
            };
            if allowed.contains(&key) {
                if out.flags.insert(key.to_string(), value).is_some() {
                    return Err(CliError::usage(format!("flag `--{key}` given twice")));
                }
            } else {
                RunConfig::qualify(key).map_err(|e| CliError::usage(e.to_string()))?;
                out.overrides.push((key.to_string(), value));
            }
            i += 1;
        }
        Ok(out)
    }

    pub fn switch(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(String::as_str)
    }

    pub fn required(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| CliError::usage(format!("`{}` needs --{name}", self.command)))
    }

    pub fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        self.required(name).map(PathBuf::from)
    }

    pub fn parsed<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        self.get(name)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::usage(format!("--{name} has invalid value `{v}`")))
            })
            .transpose()
    }
}

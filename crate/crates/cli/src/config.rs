//! JSON config files merged under command-line flags.
//!
//! A config is a flat object keyed by flag names (`alpha`, `batch-size` or
//! `batch_size`). Keys already given on the command line are ignored; the
//! rest are appended to argv as flags and the whole line is parsed again, so
//! clap's own validation applies to config values too.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};
use serde_json::Value;

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Extra argv entries contributed by the config at `path`.
pub fn config_args(path: &Path, root: &Command, matches: &ArgMatches) -> Result<Vec<OsString>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("config {} is not JSON: {e}", path.display()))?;
    let Value::Object(map) = value else {
        return Err(format!("config {} must be a JSON object", path.display()));
    };
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(Vec::new());
    };
    let cmd = root.find_subcommand(name).expect("parsed subcommand exists");

    let mut out = Vec::new();
    for (key, value) in map {
        let id = key.replace('-', "_");
        if id == "config" {
            continue;
        }
        let arg = cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_id().as_str() == id)
            .ok_or_else(|| format!("unknown config key `{key}` for `{name}`"))?;
        if sub.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = match arg.get_long() {
            Some(long) => format!("--{long}"),
            None => return Err(format!("config key `{key}` is not a flag")),
        };
        match arg.get_action() {
            ArgAction::SetTrue => {
                if value.as_bool().ok_or_else(|| format!("config key `{key}` must be a boolean"))? {
                    out.push(flag.into());
                }
            }
            ArgAction::Count => {
                let n = value.as_u64().ok_or_else(|| format!("config key `{key}` must be a count"))?;
                out.extend((0..n).map(|_| OsString::from(&flag)));
            }
            _ => {
                let items = match &value {
                    Value::Array(a) => a.iter().collect(),
                    v => vec![v],
                };
                for item in items {
                    let s = scalar(item).ok_or_else(|| format!("config key `{key}` has an unsupported value"))?;
                    out.push(format!("{flag}={s}").into());
                }
            }
        }
    }
    Ok(out)
}

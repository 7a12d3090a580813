//! Layered settings: command line > `VSEG_*` environment > config file >
//! built-in defaults.
//!
//! A config file is TOML or the `manifest.json` of an earlier run. Top-level
//! scalars set global flags, a table named after the subcommand sets that
//! subcommand's flags, and other tables are ignored. The file's entries are
//! spliced into the argument list ahead of the user's own flags, so clap's
//! last-wins rule gives the command line priority.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Command;
use serde_json::Value;

pub const ENV_PREFIX: &str = "VSEG_";

pub fn env_name(long: &str) -> String {
    format!("{ENV_PREFIX}{}", long.to_ascii_uppercase().replace('-', "_"))
}

/// Adds a `VSEG_<FLAG>` environment fallback to every long flag.
pub fn with_env(cmd: Command) -> Command {
    fn apply(cmd: Command) -> Command {
        cmd.mut_args(|a| match a.get_long().map(str::to_string) {
            Some(long) if long != "help" && long != "version" => a.env(env_name(&long)),
            _ => a,
        })
        .mut_subcommands(apply)
    }
    apply(cmd)
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn load(path: &Path) -> Result<serde_json::Map<String, Value>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Table = text.parse().map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    };
    let value = match value {
        Value::Object(mut m) if m.get("config").is_some_and(Value::is_object) && m.contains_key("command") => {
            m.remove("config").unwrap_or_default()
        }
        v => v,
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(ConfigError(format!("{}: expected a table of settings", path.display()))),
    }
}

fn render(v: &Value) -> Option<String> {
    match v {
        Value::Bool(b) => Some(if *b { "on" } else { "off" }.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        Value::Array(xs) => xs.iter().map(render).collect::<Option<Vec<_>>>().map(|p| p.join(",")),
        Value::Null | Value::Object(_) => None,
    }
}

/// `--name value` pairs for the keys of `table` that `cmd` knows, skipping
/// keys whose environment variable is set.
fn flags(cmd: &Command, table: &serde_json::Map<String, Value>, scope: &str, nested: bool) -> Vec<OsString> {
    let mut out = Vec::new();
    for (key, v) in table {
        let long = key.replace('_', "-");
        if v.is_object() {
            if !nested {
                log::warn!("config: ignoring nested table `{scope}.{key}`");
            }
            continue;
        }
        let known =
            cmd.get_arguments().any(|a| a.get_long() == Some(long.as_str()) && long != "config" && long != "help" && long != "version");
        if !known {
            log::warn!("config: unknown key `{key}` in {scope}");
            continue;
        }
        if std::env::var_os(env_name(&long)).is_some() {
            continue;
        }
        match render(v) {
            Some(s) => {
                out.push(format!("--{long}").into());
                out.push(s.into());
            }
            None => log::warn!("config: `{key}` in {scope} has no usable value"),
        }
    }
    out
}

/// Position of the subcommand token and the `--config` path, if any.
fn scan(args: &[OsString], cmd: &Command) -> (Option<usize>, Option<PathBuf>) {
    let mut config = std::env::var_os(env_name("config")).map(PathBuf::from);
    let mut i = 1;
    let mut sub = None;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if a == "--threads" {
            i += 1;
        } else if sub.is_none() && !a.starts_with('-') && cmd.find_subcommand(a.as_ref()).is_some() {
            sub = Some(i);
        }
        i += 1;
    }
    (sub, config)
}

/// The argument list with config-file entries spliced in.
pub fn expand(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, ConfigError> {
    let (sub, path) = scan(&args, cmd);
    let Some(path) = path else { return Ok(args) };
    let table = load(&path)?;
    let globals = flags(cmd, &table, "top level", true);
    let Some(at) = sub else {
        let mut out = vec![args[0].clone()];
        out.extend(globals);
        out.extend(args.into_iter().skip(1));
        return Ok(out);
    };
    let name = args[at].to_string_lossy().into_owned();
    let sub_cmd = cmd.find_subcommand(&name).expect("scan found it");
    let local = match table.get(&name) {
        Some(Value::Object(t)) => flags(sub_cmd, t, &format!("[{name}]"), false),
        Some(_) => return Err(ConfigError(format!("{}: `{name}` must be a table", path.display()))),
        None => Vec::new(),
    };
    for key in table.keys() {
        let k = key.as_str();
        if table[k].is_object() && k != name && cmd.find_subcommand(k).is_none() {
            log::warn!("config: unknown table `[{k}]`");
        }
    }
    let mut out = vec![args[0].clone()];
    out.extend(globals);
    out.extend(args[1..=at].iter().cloned());
    out.extend(local);
    out.extend(args[at + 1..].iter().cloned());
    Ok(out)
}

//! `manifest.json`: what a run was asked to do and what it wrote. Feeding it
//! back through `--config` repeats the run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Command};
use serde::Serialize;
use serde_json::{Map, Value};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Map<String, Value>,
    pub artifacts: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    pub argv: Vec<String>,
}

pub fn now() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

/// Effective value of every flag, as the string clap parsed it from, keyed
/// by long name.
fn flag_values(cmd: &Command, m: &ArgMatches, skip: &[&str]) -> Map<String, Value> {
    let mut out = Map::new();
    for arg in cmd.get_arguments() {
        let (id, Some(long)) = (arg.get_id().as_str(), arg.get_long()) else { continue };
        if skip.contains(&long) {
            continue;
        }
        let Ok(Some(raw)) = m.try_get_raw(id) else { continue };
        let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        out.insert(long.to_string(), Value::String(vals.join(",")));
    }
    out
}

pub struct Recorder {
    command: String,
    started_at: String,
    config: Map<String, Value>,
    seed: Option<u64>,
    argv: Vec<String>,
}

impl Recorder {
    pub fn new(cmd: &Command, root: &ArgMatches, argv: &[String]) -> Self {
        let (name, sub) = root.subcommand().expect("a subcommand is required");
        let sub_cmd = cmd.find_subcommand(name).expect("matched subcommand exists");
        let mut config = flag_values(cmd, root, &["config", "help", "version"]);
        let seed = sub.try_get_raw("seed").ok().flatten().and_then(|mut v| v.next()).and_then(|v| v.to_str()?.parse().ok());
        let flags = flag_values(sub_cmd, sub, &["config", "threads", "help", "version"]);
        config.insert(name.to_string(), Value::Object(flags));
        Recorder { command: name.to_string(), started_at: now(), config, seed, argv: argv.to_vec() }
    }

    pub fn finish(self, artifacts: Vec<PathBuf>, path: &Path) -> std::io::Result<()> {
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            artifacts,
            started_at: self.started_at,
            finished_at: now(),
            argv: self.argv,
        };
        let text = serde_json::to_string_pretty(&m).map_err(std::io::Error::other)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text + "\n")
    }
}

/// Where the manifest of a run writing into `out` goes: inside it for a
/// directory, beside it for a single file.
pub fn location(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(MANIFEST_FILE)
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

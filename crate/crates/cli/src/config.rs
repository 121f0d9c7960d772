//! Config-file resolution: flat JSON with dotted keys, flags win, and the
//! resolved snapshot written to `config.json`.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command, CommandFactory, FromArgMatches};
use serde_json::{Map, Value};

use crate::args::Cli;

/// Ids that are not config keys.
const NOT_CONFIGURABLE: &[&str] = &["help", "version", "run.config"];
/// The output directory is where a run goes, not what it computes.
const NOT_SNAPSHOTTED: &[&str] = &["help", "version", "run.config", "run.out"];

#[derive(Debug)]
pub enum ResolveError {
    /// Help or version output requested; print and exit 0.
    Display(clap::Error),
    Usage(String),
}

impl From<clap::Error> for ResolveError {
    fn from(e: clap::Error) -> Self {
        use clap::error::ErrorKind::*;
        match e.kind() {
            DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand => {
                ResolveError::Display(e)
            }
            _ => ResolveError::Usage(e.render().to_string()),
        }
    }
}

pub struct Resolved {
    pub cli: Cli,
    /// The resolved flat config of the chosen subcommand.
    pub snapshot: Map<String, Value>,
}

fn subcommand<'a>(root: &'a Command, name: &str) -> &'a Command {
    root.find_subcommand(name).expect("parsed subcommand exists")
}

fn value_to_flag(key: &str, v: &Value) -> Result<String, ResolveError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|i| value_to_flag(key, i))
            .collect::<Result<Vec<_>, _>>()
            .map(|parts| parts.join(",")),
        _ => Err(ResolveError::Usage(format!(
            "config key `{key}` must be a string, number, boolean or list"
        ))),
    }
}

fn read_config(path: &Path) -> Result<Map<String, Value>, ResolveError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ResolveError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ResolveError::Usage(format!(
            "config {} must be a JSON object of dotted keys",
            path.display()
        ))),
        Err(e) => Err(ResolveError::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Parses `argv`, folding in `--config` values for every flag not given on
/// the command line.
pub fn resolve(argv: Vec<OsString>) -> Result<Resolved, ResolveError> {
    let root = Cli::command();
    let mut matches = root.clone().try_get_matches_from(&argv)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let name = name.to_string();
    if let Some(path) = sub.get_one::<std::path::PathBuf>("run.config").cloned() {
        let config = read_config(&path)?;
        let cmd = subcommand(&root, &name);
        let mut extra = Vec::new();
        for (key, value) in &config {
            let arg = cmd
                .get_arguments()
                .find(|a| a.get_id().as_str() == key && !NOT_CONFIGURABLE.contains(&key.as_str()))
                .ok_or_else(|| {
                    let known: Vec<&str> = cmd
                        .get_arguments()
                        .map(|a| a.get_id().as_str())
                        .filter(|k| !NOT_CONFIGURABLE.contains(k))
                        .collect();
                    ResolveError::Usage(format!(
                        "unknown config key `{key}` for `{name}`; known keys: {}",
                        known.join(", ")
                    ))
                })?;
            if sub.value_source(key) == Some(ValueSource::CommandLine) {
                continue;
            }
            let long = arg.get_long().expect("every flag has a long name");
            extra.push(OsString::from(format!("--{long}={}", value_to_flag(key, value)?)));
        }
        let mut argv = argv;
        argv.extend(extra);
        matches = root.clone().try_get_matches_from(&argv)?;
    }
    let cli = Cli::from_arg_matches(&matches)?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let snapshot = snapshot(subcommand(&root, &name), sub);
    Ok(Resolved { cli, snapshot })
}

fn typed(raw: &str) -> Value {
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    match raw.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::String(raw.to_string()),
    }
}

fn snapshot(cmd: &Command, m: &ArgMatches) -> Map<String, Value> {
    let mut out = Map::new();
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if NOT_SNAPSHOTTED.contains(&id) {
            continue;
        }
        if let Some(mut raw) = m.get_raw(id) {
            if let Some(v) = raw.next() {
                out.insert(id.to_string(), typed(&v.to_string_lossy()));
            }
        }
    }
    out
}

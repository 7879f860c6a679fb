//! Optional JSON config file. Its values become flags placed before the
//! user's own, and a flag the user gives explicitly replaces the config
//! entry of the same name.
//!
//! ```json
//! {
//!   "workers": 4,
//!   "score": { "method": "easy_ep", "trace": ["a.moet", "b.moet"] },
//!   "plan": { "m": 16 }
//! }
//! ```
//!
//! Top-level scalars are global flags; objects hold flags for the
//! subcommand of that name. Keys are applied in sorted order and may use
//! `_` or `-`. `true` becomes a bare flag, `false` and `null` are dropped,
//! arrays repeat the flag.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

/// Global flags that take a value, as they may appear before the subcommand.
const GLOBAL_VALUED: [&str; 2] = ["--config", "--workers"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

fn flag_name(arg: &str) -> Option<&str> {
    let name = arg.strip_prefix("--")?;
    Some(name.split_once('=').map_or(name, |(n, _)| n))
}

/// Value of `--config` anywhere on the command line.
fn config_path(argv: &[OsString]) -> Result<Option<PathBuf>, ConfigError> {
    let mut found = None;
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            let v = it.next().ok_or_else(|| ConfigError::Usage("--config needs a value".into()))?;
            found = Some(PathBuf::from(v));
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    Ok(found)
}

/// Index of the subcommand token, skipping leading global flags.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if GLOBAL_VALUED.contains(&s.as_ref()) {
            i += 2;
        } else if s.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

fn scalar(key: &str, v: &Value) -> Result<String, ConfigError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(ConfigError::Usage(format!("config key {key:?} has an unsupported value {v}"))),
    }
}

/// Flags for one config object, skipping names already given by the user.
fn flags(section: &Map<String, Value>, given: &[String], nested: bool) -> Result<Vec<OsString>, ConfigError> {
    let mut out = Vec::new();
    for (key, value) in section {
        if value.is_object() {
            if nested {
                continue;
            }
            return Err(ConfigError::Usage(format!("config key {key:?} cannot hold an object here")));
        }
        let name = key.replace('_', "-");
        if given.iter().any(|g| *g == name) {
            continue;
        }
        let flag = format!("--{name}");
        match value {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    out.push(flag.clone().into());
                    out.push(scalar(key, item)?.into());
                }
            }
            v => {
                out.push(flag.into());
                out.push(scalar(key, v)?.into());
            }
        }
    }
    Ok(out)
}

fn load(path: &Path) -> Result<Map<String, Value>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    match serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })? {
        Value::Object(map) => Ok(map),
        _ => Err(ConfigError::Usage(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Returns `argv` with the config file's flags spliced in.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&argv)? else {
        return Ok(argv);
    };
    let config = load(&path)?;
    let Some(sub) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let given: Vec<String> = argv[1..]
        .iter()
        .filter_map(|a| flag_name(&a.to_string_lossy()).map(str::to_owned))
        .collect();
    let subcommand = argv[sub].to_string_lossy().into_owned();

    let mut out: Vec<OsString> = argv[..=sub].to_vec();
    out.extend(flags(&config, &given, true)?);
    if let Some(section) = config.get(&subcommand).or_else(|| config.get(&subcommand.replace('-', "_"))) {
        let section = section
            .as_object()
            .ok_or_else(|| ConfigError::Usage(format!("config section {subcommand:?} must be an object")))?;
        out.extend(flags(section, &given, false)?);
    }
    out.extend(argv[sub + 1..].iter().cloned());
    Ok(out)
}

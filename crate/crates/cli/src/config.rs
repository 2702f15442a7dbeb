//! Merging of config files with command-line flags, and the reverse mapping
//! from resolved parameters to an explicit argument list.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::exit::InputError;

/// Keys whose values are file paths. Relative paths in a config file are
/// taken relative to the config file.
const PATH_KEYS: [&str; 4] = ["input", "model", "grid-file", "cv-result"];

/// Fills every flag left unset in `flags` from the JSON object in `config`.
/// Keys in the file must be long flag names of the command.
pub fn merge_config<P>(flags: &P, config: Option<&Path>) -> Result<P>
where
    P: Serialize + DeserializeOwned,
{
    let Some(path) = config else {
        return clone_via_json(flags);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| InputError::new(format!("cannot read config {}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| InputError::new(format!("config {}: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(InputError::new(format!("config {} is not a JSON object", path.display())).into());
    };
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut merged = as_object(flags)?;
    for (key, value) in file {
        let Some(slot) = merged.get_mut(&key) else {
            return Err(InputError::new(format!(
                "config {}: unknown key `{key}`",
                path.display()
            ))
            .into());
        };
        if slot.is_null() {
            *slot = match value {
                Value::String(s) if PATH_KEYS.contains(&key.as_str()) => {
                    Value::String(base.join(s).to_string_lossy().into_owned())
                }
                v => v,
            };
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| InputError::new(format!("config {}: {e}", path.display())).into())
}

fn clone_via_json<P: Serialize + DeserializeOwned>(p: &P) -> Result<P> {
    Ok(serde_json::from_value(serde_json::to_value(p)?)?)
}

fn as_object<P: Serialize>(p: &P) -> Result<Map<String, Value>> {
    match serde_json::to_value(p)? {
        Value::Object(m) => Ok(m),
        _ => bail!("parameters do not serialize to an object"),
    }
}

/// `--key=value` pairs reproducing `params`. Unset values are skipped and
/// lists are comma-joined.
pub fn to_args<P: Serialize>(params: &P) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (key, value) in as_object(params)? {
        let text = match value {
            Value::Null => continue,
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            Value::Object(_) => bail!("parameter `{key}` is not a scalar or list"),
        };
        args.push(format!("--{key}={text}"));
    }
    Ok(args)
}

/// Absolute form of a user-supplied path, so that manifests replay from any
/// working directory.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path)
        .with_context(|| format!("cannot resolve {}", path.display()))
        .map_err(|e| InputError::new(format!("{e:#}")).into())
}

/// Resolves a required path parameter.
pub fn required(path: &mut Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let Some(p) = path.as_ref() else {
        return Err(InputError::new(format!("--{flag} is required")).into());
    };
    let abs = absolute(p)?;
    *path = Some(abs.clone());
    Ok(abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::{PenaltyArgs, TrainParams};

    #[test]
    fn flags_win_and_paths_are_rebased() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"lambda1": 3.5, "lambda2": 0.02, "input": "data.csv"}"#).unwrap();
        let flags = TrainParams {
            penalty: PenaltyArgs { lambda1: Some(7.0), ..Default::default() },
            ..Default::default()
        };
        let merged = merge_config(&flags, Some(&cfg)).unwrap();
        assert_eq!(merged.penalty.lambda1, Some(7.0));
        assert_eq!(merged.penalty.lambda2, Some(0.02));
        assert_eq!(merged.data.input, Some(dir.path().join("data.csv")));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"lamda1": 1}"#).unwrap();
        let err = merge_config(&TrainParams::default(), Some(&cfg)).unwrap_err();
        assert!(err.to_string().contains("lamda1"));
    }

    #[test]
    fn args_round_trip_floats() {
        let p = PenaltyArgs {
            lambda1: Some(0.1 + 0.2),
            lambda3: Some(1e-7),
            ..Default::default()
        };
        let args = to_args(&p).unwrap();
        assert_eq!(args, vec!["--lambda1=0.30000000000000004", "--lambda3=1e-7"]);
        let back: f64 = args[1].trim_start_matches("--lambda3=").parse().unwrap();
        assert_eq!(back, 1e-7);
    }
}

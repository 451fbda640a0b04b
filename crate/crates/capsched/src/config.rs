//! Scenario files: TOML documents, or the `config` object embedded in a
//! report, with dotted-key overrides applied before validation.

use std::fs;
use std::path::Path;

use capsched_core::sim::ScenarioConfig;

use crate::error::CliError;

/// Parses `key.path=value`; the value is read as a TOML literal and falls
/// back to a plain string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::config(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("`{key}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn read_document(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let config = doc.get("config").cloned().unwrap_or(doc);
        let cfg: ScenarioConfig =
            serde_json::from_value(config).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let value = toml::Value::try_from(&cfg).map_err(|e| CliError::config(e.to_string()))?;
        return Ok(value.as_table().cloned().unwrap_or_default());
    }
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Loads the effective scenario: file (if any), then `overrides`, then the
/// seed, then validation.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut doc = match path {
        Some(p) => read_document(p)?,
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        set_path(&mut doc, &key, value)?;
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::config("seed must fit in a signed 64-bit integer"))?;
        doc.insert("seed".into(), toml::Value::Integer(seed));
    }
    let cfg: ScenarioConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use capsched_core::scheduler::Policy;

    #[test]
    fn overrides_win_over_file_and_defaults_fill_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        fs::write(&path, "horizon_s = 60.0\nwarmup_s = 0.0\n[scaling]\nrelease_duration_s = 30.0\n").unwrap();
        let cfg = load_config(
            Some(&path),
            &["scaling.release_duration_s=20".into(), "policy=kube".into()],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.horizon_s, 60.0);
        assert_eq!(cfg.scaling.release_duration_s, 20.0);
        assert_eq!(cfg.policy, Policy::Kube);
        assert_eq!(cfg.scaling.keep_alive_s, 60.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(load_config(None, &["scaling.bogus=1".into()], Some(1)).is_err());
        assert!(load_config(None, &["window_s=0".into()], Some(1)).is_err());
        assert!(load_config(None, &["noequals".into()], Some(1)).is_err());
        assert!(load_config(None, &["horizon_s=60".into()], Some(1)).is_err());
    }

    #[test]
    fn embedded_config_round_trips() {
        let cfg = load_config(None, &["horizon_s=120".into(), "warmup_s=10".into()], Some(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        fs::write(&path, serde_json::to_string(&serde_json::json!({ "config": cfg })).unwrap()).unwrap();
        assert_eq!(load_config(Some(&path), &[], None).unwrap(), cfg);
    }
}

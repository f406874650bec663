//! Training configuration resolved from flags, a `key=value` file and
//! built-in defaults, in that order of priority.

use serde_json::{Map, Value};

use crate::trainer::TrainConfig;

/// `key=value` pairs from a config file. Blank lines and lines starting with
/// `#` are skipped; keys may use dashes or underscores, and `lr` names the
/// learning rate.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
        let key = canonical_key(k.trim());
        if key.is_empty() {
            return Err(format!("config line {}: empty key", n + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn canonical_key(k: &str) -> String {
    match k {
        "lr" => "learning_rate".to_string(),
        _ => k.replace('-', "_"),
    }
}

/// Numbers and booleans are read as JSON, anything else as a string.
fn text_value(v: &str) -> Value {
    match serde_json::from_str::<Value>(v) {
        Ok(j @ (Value::Number(_) | Value::Bool(_))) => j,
        _ => Value::String(v.to_string()),
    }
}

/// Apply file entries, then flag overrides, on top of the defaults.
pub fn resolve(file: &[(String, String)], flags: &[(&str, Value)]) -> Result<TrainConfig, String> {
    let Value::Object(mut map) = serde_json::to_value(TrainConfig::default()).expect("config serializes") else {
        unreachable!("config is a struct")
    };
    let known = |map: &Map<String, Value>, k: &str| {
        if map.contains_key(k) {
            Ok(())
        } else {
            Err(format!("unknown config key `{k}`"))
        }
    };
    for (k, v) in file {
        known(&map, k)?;
        map.insert(k.clone(), text_value(v));
    }
    for (k, v) in flags {
        known(&map, k)?;
        map.insert((*k).to_string(), v.clone());
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| format!("invalid config value: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    #[test]
    fn flag_beats_file_beats_default() {
        let file = parse_config_text("# comment\nd = 40\nk=4\n\nlr=0.01\nvariant=no-factor\ndrl-tied=false\n").unwrap();
        let cfg = resolve(&file, &[("k", 2.into())]).unwrap();
        assert_eq!(cfg.d, 40);
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.variant, Variant::NoFactor);
        assert!(!cfg.drl_tied);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_entries_are_reported() {
        assert!(parse_config_text("d 40").unwrap_err().contains("line 1"));
        let unknown = resolve(&[("depth".into(), "3".into())], &[]).unwrap_err();
        assert!(unknown.contains("depth"));
        assert!(resolve(&[("d".into(), "many".into())], &[]).is_err());
        assert!(resolve(&[("k".into(), "0".into())], &[]).is_err());
    }
}

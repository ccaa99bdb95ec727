//! `key=value` patches applied to a config through its JSON form.

use handcast::{Config, Error, Result};
use serde_json::Value;

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies each `a.b=value` in order. Values are read as JSON when they
/// parse, otherwise as strings.
pub fn apply(base: &Config, sets: &[String]) -> Result<Config> {
    let mut v = serde_json::to_value(base).expect("config serialises");
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let mut slot = &mut v;
        for part in key.trim().split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config field {key:?}")))?;
        }
        *slot = parse_value(raw.trim());
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_nested_fields() {
        let sets = ["d=16", "modalities.text=false", "roi_bias=off", "learning_rate=0.5"].map(String::from);
        let c = apply(&Config::default(), &sets).unwrap();
        assert_eq!(c.d, 16);
        assert!(!c.modalities.text);
        assert_eq!(c.roi_bias, handcast::RoiBias::Off);
        assert_eq!(c.learning_rate, 0.5);
        assert!(apply(&Config::default(), &["nope=1".into()]).is_err());
        assert!(apply(&Config::default(), &["d=x".into()]).is_err());
        assert!(apply(&Config::default(), &["d".into()]).is_err());
    }
}

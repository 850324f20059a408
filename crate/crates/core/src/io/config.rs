use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Version stamped into configs, plans and manifests.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub(crate) fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

/// Deserializes a config object, collecting every unknown field and type
/// error instead of stopping at the first.
///
/// `T` must use `#[serde(default, deny_unknown_fields)]`: each key is then
/// checked on its own against the defaults.
pub fn parse_config<T: DeserializeOwned>(value: &Value) -> std::result::Result<T, Vec<String>> {
    let Value::Object(obj) = value else {
        return Err(vec!["config must be a JSON object".into()]);
    };
    let mut obj = obj.clone();
    let mut errs = Vec::new();
    match obj.remove("schema_version") {
        None => {}
        Some(Value::Number(n)) if n.as_u64() == Some(CONFIG_SCHEMA_VERSION as u64) => {}
        Some(other) => errs.push(format!(
            "schema_version: expected {CONFIG_SCHEMA_VERSION}, found {other}"
        )),
    }
    for (key, v) in &obj {
        let mut single = Map::new();
        single.insert(key.clone(), v.clone());
        if let Err(e) = serde_json::from_value::<T>(Value::Object(single)) {
            errs.push(format!("{key}: {e}"));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| vec![e.to_string()])
}

/// Reads and parses a config file; all schema problems are joined into one
/// format error.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let value: Value = super::read_json(path)?;
    parse_config(&value).map_err(|errs| Error::Format(format!("{}: {}", path.display(), errs.join("; "))))
}

//! Layered settings: defaults, then a JSON config file, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

/// Recursively overlays `over` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` with the contents of `file` merged on top. Flags are applied
/// by the caller afterwards.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(defaults).expect("settings serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(CliError::config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, over);
    }
    serde_json::from_value(value).map_err(|e| CliError::config(e))
}

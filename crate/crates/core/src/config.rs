//! JSON configuration with every omitted field filled from a base value, so
//! the echoed config always lists the complete resolved settings.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Recursively overlay `over` onto `base`; non-object values replace.
pub fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `base` with `user` overlaid. Unknown fields are rejected.
pub fn materialize<T: Serialize + DeserializeOwned>(base: &T, user: serde_json::Value) -> Result<T> {
    let mut merged = serde_json::to_value(base).expect("config serializes");
    if let (Some(b), Some(u)) = (merged.as_object(), user.as_object()) {
        if let Some(k) = u.keys().find(|k| !b.contains_key(*k)) {
            return Err(Error::Config(format!("unknown field {k:?}")));
        }
    }
    merge_json(&mut merged, user);
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

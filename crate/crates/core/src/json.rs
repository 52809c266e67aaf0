use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{McdError, Result};

/// Pretty JSON with a trailing newline; output is byte-stable for a given value.
pub fn write_json_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| McdError::json(path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| McdError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| McdError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| McdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| McdError::json(path, e))
}

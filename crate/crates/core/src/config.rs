//! Plain-text `key = value` run configuration files.

use std::path::Path;

use crate::error::{bail, Error, Result};

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; underscores in keys are read as hyphens so `layers_ui` and
/// `layers-ui` name the same option. Later duplicates override earlier ones.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Config, "config line {}: expected key = value", n + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!(Config, "config line {}: empty key", n + 1);
        }
        let value = v.trim().to_string();
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => out.push((key, value)),
        }
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

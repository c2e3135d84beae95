use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const RESOLVED: &str = "resolved-config.json";

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Contents of a JSON config file, which must hold an object.
pub fn load_patch(path: Option<&Path>) -> anyhow::Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !patch.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(Some(patch))
}

/// `defaults` overlaid with `patch`.
pub fn resolve_with<T: Serialize + DeserializeOwned>(defaults: &T, patch: Option<Value>) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(patch) = patch {
        merge(&mut value, patch);
    }
    serde_json::from_value(value).context("invalid configuration")
}

/// `defaults` overlaid with the JSON file at `path`, if any.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>) -> anyhow::Result<T> {
    resolve_with(defaults, load_patch(path)?)
}

pub fn required(value: &Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    match value {
        Some(p) => Ok(p.clone()),
        None => bail!("missing --{flag} (flag or config entry)"),
    }
}

pub fn create_out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn write_resolved<T: Serialize>(dir: &Path, config: &T) -> anyhow::Result<()> {
    write_file(dir.join(RESOLVED), serde_json::to_string_pretty(config)? + "\n")
}

pub fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn nested_merge() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
    }

    #[test]
    fn non_object_replaces() {
        let mut base = json!({"a": {"b": 1}});
        merge(&mut base, json!({"a": null}));
        assert_eq!(base, json!({"a": null}));
    }
}

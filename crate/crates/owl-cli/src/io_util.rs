//! Atomic file writes and small serialization helpers. All outputs go
//! through temp-file-plus-rename so concurrent readers never observe a
//! partial file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} -> {}", tmp.display(), path.display()))?;
    Ok(())
}

/// Pretty JSON plus trailing newline; the recount tooling reproduces this
/// byte for byte.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Single-record CSV mirror: a header row of field names and one row of
/// values, derived from the JSON serialization of `value`.
pub fn write_flat_csv<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_value(value)?;
    let map = json
        .as_object()
        .context("flat CSV mirrors need a JSON object")?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(map.keys())?;
    writer.write_record(map.values().map(json_scalar))?;
    let bytes = writer.into_inner()?;
    write_atomic(path, &bytes)
}

fn json_scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

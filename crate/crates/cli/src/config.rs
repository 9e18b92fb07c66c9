use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::de::DeserializeOwned;
use serde_json::Value;

pub fn load_config(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !value.is_object() {
        bail!("{}: top level must be a JSON object", path.display());
    }
    Ok(value)
}

/// Deserializes with the offending field path in the error.
pub fn typed<T: DeserializeOwned>(value: Value) -> anyhow::Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("config error at `{path}`: {}", e.into_inner())
    })
}

/// Applies `a.b.c=value`. The value is parsed as JSON and kept as a string
/// when that fails.
pub fn parse_set(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{assignment}`"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("--set key `{key}` is not a dotted path");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if !node.is_object() {
            bail!("--set {key}: `{part}` is inside a non-object value");
        }
        let obj = node.as_object_mut().unwrap();
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// `start:end[:step]` with step 4 by default, or `a,b,c`.
pub fn parse_sweep_n(spec: &str) -> anyhow::Result<Vec<usize>> {
    let num = |s: &str| s.trim().parse::<usize>().with_context(|| format!("bad number `{s}` in --sweep-n"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let (start, end, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 4),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => bail!("--sweep-n expects start:end[:step], got `{spec}`"),
        };
        if step == 0 || start > end {
            bail!("--sweep-n range `{spec}` is empty");
        }
        Ok((start..=end).step_by(step).collect())
    } else {
        spec.split(',').map(num).collect()
    }
}

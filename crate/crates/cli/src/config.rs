//! Flag/file merging. Each subcommand has a flag struct (every field
//! optional) and a resolved struct (every field filled). A JSON config file
//! uses the same flat keys as the flags; flags win.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

pub const RESOLVED_NAME: &str = "config.resolved.json";

/// An invalid invocation; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Three extents written `TxHxW`, e.g. `3x8x8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims3(pub [usize; 3]);

impl FromStr for Dims3 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(format!("expected TxHxW, got {s:?}"));
        }
        let mut d = [0; 3];
        for (slot, p) in d.iter_mut().zip(parts) {
            *slot = p.trim().parse().map_err(|_| format!("bad extent {p:?} in {s:?}"))?;
            if *slot == 0 {
                return Err(format!("extents must be positive in {s:?}"));
            }
        }
        Ok(Dims3(d))
    }
}

impl fmt::Display for Dims3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a}x{b}x{c}")
    }
}

impl Serialize for Dims3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Dims3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            List([usize; 3]),
        }
        match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::List(l) => Ok(Dims3(l)),
        }
    }
}

fn read_object(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

/// Overlay `flags` (unset fields skipped) on the optional config file and
/// decode the result. Keys must be fields of `R`'s serialized default;
/// unknown keys and bad values are usage errors.
pub fn resolve<F: Serialize, R: DeserializeOwned + Serialize + Default>(config: Option<&Path>, flags: &F) -> anyhow::Result<R> {
    let mut merged = match config {
        Some(p) => read_object(p)?,
        None => Map::new(),
    };
    if let Value::Object(known) = serde_json::to_value(R::default())? {
        if let Some(k) = merged.keys().find(|k| !known.contains_key(*k)) {
            return Err(usage(format!("invalid configuration: unknown key {k:?}")));
        }
    }
    if let Value::Object(f) = serde_json::to_value(flags)? {
        merged.extend(f.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid configuration: {e}")))
}

/// Write the resolved configuration next to a run's outputs.
pub fn echo<R: Serialize>(dir: &Path, resolved: &R) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_NAME);
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Directory holding a file output.
pub fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `dir/name.sten` -> `dir/name.<suffix>`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}.{suffix}"))
}

//! File I/O helpers shared by the subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::Failure;

pub fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let fail = |e: &dyn std::fmt::Display| Failure::usage(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| fail(&e))?;
    tmp.write_all(bytes).map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Reads an optional JSON config file into `T`, or returns `T::default()`.
pub fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Value), Failure> {
    match path {
        None => Ok((T::default(), Value::Object(Default::default()))),
        Some(p) => {
            let bytes = read(p)?;
            let raw: Value =
                serde_json::from_slice(&bytes).map_err(|e| Failure::usage(format!("invalid config {}: {e}", p.display())))?;
            let cfg = serde_json::from_value(raw.clone())
                .map_err(|e| Failure::usage(format!("invalid config {}: {e}", p.display())))?;
            Ok((cfg, raw))
        }
    }
}

/// Run manifest written next to every command's outputs.
#[derive(Serialize)]
pub struct RunManifest<C: Serialize, S: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: C,
    pub summary: S,
}

impl<C: Serialize, S: Serialize> RunManifest<C, S> {
    pub fn new(command: &'static str, seed: Option<u64>, config: C, summary: S) -> Self {
        Self { command, version: env!("CARGO_PKG_VERSION"), seed, config, summary }
    }
}

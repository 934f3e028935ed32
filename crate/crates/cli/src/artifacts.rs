//! Output directories whose files all carry the config hash and end up in a
//! hashed manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::sha256_hex;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Hash of the config sections that determine the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_key: Option<String>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Compatibility(format!("{}: {e} (run `scatternet gen` first)", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Compatibility(format!("{}: {e}", path.display())))
    }

    /// Checks every listed file against its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for f in &self.files {
            let bytes = std::fs::read(dir.join(&f.path)).map_err(CliError::io(format!("reading {}", f.path)))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(CliError::Compatibility(format!("{} changed since the manifest was written", f.path)));
            }
        }
        Ok(())
    }
}

pub struct Artifacts {
    root: PathBuf,
    hash: String,
    files: Vec<ManifestEntry>,
}

impl Artifacts {
    pub fn create(root: PathBuf, hash: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&root).map_err(CliError::io(format!("creating {}", root.display())))?;
        Ok(Self { root, hash: hash.to_string(), files: Vec::new() })
    }

    /// Comment line for text formats.
    pub fn stamp(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(CliError::io(format!("creating {}", parent.display())))?;
        }
        std::fs::write(&path, bytes).map_err(CliError::io(format!("writing {}", path.display())))?;
        self.files.push(ManifestEntry { path: rel.to_string(), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    /// Writes a text file produced by `f`, passing it the hash comment.
    pub fn write_text<F>(&mut self, rel: &str, f: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&str, &mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        f(&self.stamp(), &mut buf).map_err(CliError::io(format!("formatting {rel}")))?;
        self.write(rel, &buf)
    }

    /// JSON object with an added `config_hash` key.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let body = serde_json::to_value(value).map_err(|e| CliError::Other(e.to_string()))?;
        let doc = match body {
            Value::Object(map) => {
                let mut out = serde_json::Map::new();
                out.insert("config_hash".into(), json!(self.hash));
                out.extend(map);
                Value::Object(out)
            }
            other => json!({ "config_hash": self.hash, "value": other }),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("JSON value serializes");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes the manifest and returns its SHA-256.
    pub fn finish(mut self, dataset_key: Option<String>) -> Result<String, CliError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest { config_hash: self.hash.clone(), dataset_key, files: self.files };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, &text).map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

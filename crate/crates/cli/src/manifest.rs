// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests: what a command read, what it wrote, and content digests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use emprobe::store::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> emprobe::Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| emprobe::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Collects file lists while a command runs.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: impl Serialize) -> Self {
        Self {
            command: command.to_owned(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn finish(self, path: &Path) -> emprobe::Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs.iter().map(|p| digest_file(p)).collect::<Result<_, _>>()?,
            outputs: self.outputs.iter().map(|p| digest_file(p)).collect::<Result<_, _>>()?,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| emprobe::Error::Invariant(format!("manifest: {e}")))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_digests() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, b"abc").unwrap();
        let mut r = Recorder::new("demo", serde_json::json!({"k": 1}));
        r.input(&a);
        r.output(&a);
        let m = dir.path().join("manifest.json");
        r.finish(&m).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&m).unwrap()).unwrap();
        assert_eq!(v["command"], "demo");
        assert_eq!(v["inputs"][0]["sha256"], sha256_hex(b"abc"));
        assert_eq!(v["outputs"].as_array().unwrap().len(), 1);
    }
}

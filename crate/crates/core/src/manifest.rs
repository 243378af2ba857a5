//! Per-command run manifest written next to a command's outputs.

use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the canonical configuration text.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn artifact_version() -> String {
    format!("v{}-{}", env!("CARGO_PKG_VERSION"), if cfg!(debug_assertions) { "debug" } else { "release" })
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Collects outputs while a command runs, then writes the manifest.
#[derive(Debug)]
pub struct RunRecorder {
    command: String,
    args: Vec<String>,
    config_text: String,
    seed: Option<u64>,
    started: DateTime<Utc>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn start(command: &str, args: Vec<String>, config_text: &str, seed: Option<u64>) -> RunRecorder {
        RunRecorder {
            command: command.to_string(),
            args,
            config_text: config_text.to_string(),
            seed,
            started: Utc::now(),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    pub fn finish(&self, dir: &Path) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command.clone(),
            args: self.args.clone(),
            config_hash: config_hash(&self.config_text),
            seed: self.seed,
            version: artifact_version(),
            started: stamp(self.started),
            finished: stamp(Utc::now()),
            outputs: self.outputs.clone(),
        };
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        crate::data::write_json(&dir.join(RUN_MANIFEST_FILE), &m)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        assert_eq!(
            config_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_ne!(config_hash("alpha = 1\n"), config_hash("alpha = 2\n"));
    }

    #[test]
    fn manifest_lists_outputs_once() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunRecorder::start("train", vec!["x".into()], "alpha = 1\n", Some(3));
        r.output(dir.path().join("a.csv"));
        r.output(dir.path().join("a.csv"));
        let m = r.finish(dir.path()).unwrap();
        assert_eq!(m.outputs.len(), 1);
        let back: RunManifest = crate::data::read_json(&dir.path().join(RUN_MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert!(m.started <= m.finished);
    }
}

//! Report files. Every file carries the tool version, seed and resolved
//! config; only `meta.json` carries a timestamp.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::RunError;

/// Identification shared by every report file of a run.
#[derive(Clone, Debug, Serialize)]
pub struct Stamp {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub paths: usize,
    pub input_sha256: String,
    pub config: Value,
}

pub struct OutputDir {
    dir: PathBuf,
    stamp: Stamp,
    files: Vec<String>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io(format!("{}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(dir: &Path, stamp: Stamp) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            stamp,
            files: Vec::new(),
        })
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// `{"stamp": ..., "report": ...}`, pretty printed.
    pub fn json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<(), RunError> {
        let doc = serde_json::json!({ "stamp": &self.stamp, "report": report });
        let mut text =
            serde_json::to_string_pretty(&doc).map_err(|e| RunError::Io(e.to_string()))?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }

    /// CSV body produced by `body`, after `#` comment lines identifying the run.
    pub fn csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> hjm_hypo_core::Result<()>,
    ) -> Result<(), RunError> {
        let mut buf = format!(
            "# {} {} {} seed={} paths={} input_sha256={}\n# config: {}\n",
            self.stamp.tool,
            self.stamp.version,
            self.stamp.command,
            self.stamp.seed,
            self.stamp.paths,
            self.stamp.input_sha256,
            self.stamp.config
        )
        .into_bytes();
        body(&mut buf)?;
        self.put(name, &buf)
    }

    /// Index of the run, written last. Holds the only wall-clock field.
    pub fn finish(mut self, threads: usize, headline: &str) -> Result<Vec<String>, RunError> {
        let unix_seconds = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "tool": self.stamp.tool,
            "version": self.stamp.version,
            "command": self.stamp.command,
            "seed": self.stamp.seed,
            "paths": self.stamp.paths,
            "threads": threads,
            "input_sha256": self.stamp.input_sha256,
            "config": self.stamp.config,
            "files": self.files,
            "headline": headline,
            "timestamp_unix": unix_seconds,
        });
        let text =
            serde_json::to_string_pretty(&meta).map_err(|e| RunError::Io(e.to_string()))? + "\n";
        let path = self.dir.join("meta.json");
        fs::write(&path, text).map_err(io_err(&path))?;
        self.files.push("meta.json".into());
        Ok(self.files)
    }
}

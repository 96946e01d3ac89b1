use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::Failure;

pub const VERSION: &str = concat!("latentplan ", env!("CARGO_PKG_VERSION"));

/// Record of one command invocation, written before any work starts and never rewritten.
/// Completion goes into a separate status file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Model variant, or `oracle` for true-dynamics planning.
    pub method: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Output paths relative to the manifest's directory.
    pub outputs: BTreeMap<String, PathBuf>,
    pub started_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub command: String,
    pub finished_at: String,
    pub success: bool,
    pub error: Option<String>,
}

pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("manifest-{command}.json"))
}

pub fn status_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("status-{command}.json"))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

impl RunManifest {
    /// Creates the output directory and writes the manifest.
    pub fn begin(self, dir: &Path) -> Result<Run, Failure> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let status = status_path(dir, &self.command);
        if status.exists() {
            std::fs::remove_file(&status).map_err(io_err(&status))?;
        }
        write_json(&manifest_path(dir, &self.command), &self)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            command: self.command,
        })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }
}

/// A started run; `finish` records the outcome.
pub struct Run {
    pub dir: PathBuf,
    command: String,
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn finish<T>(self, result: Result<T, Failure>) -> Result<T, Failure> {
        let status = RunStatus {
            command: self.command.clone(),
            finished_at: now(),
            success: result.is_ok(),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        write_json(&status_path(&self.dir, &self.command), &status)?;
        result
    }
}

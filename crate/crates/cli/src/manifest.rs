use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run.json";

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub outputs: Vec<PathBuf>,
}

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("AGGPOSE_BUILD_ID"))
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let now = Utc::now();
        RunManifest {
            command: command.into(),
            args: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed: None,
            build: build_id(),
            started: now,
            finished: now,
            outputs: Vec::new(),
        }
    }

    /// Stamp the end time and write atomically; every listed output must exist.
    pub fn finish(mut self, path: &Path) -> CliResult<PathBuf> {
        self.outputs.sort();
        self.outputs.dedup();
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(CliError::Check(format!("manifest lists missing output {}", missing.display())));
        }
        self.finished = Utc::now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        aggpose_data::io::write_atomic(path, text.as_bytes())?;
        Ok(path.to_path_buf())
    }
}

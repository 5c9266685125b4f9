use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record written once per run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    /// The run id is derived from the command and the resolved config only, so
    /// identical invocations share it.
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        let mut hasher = DefaultHasher::new();
        (command, config.to_string()).hash(&mut hasher);
        Self {
            run_id: format!("{command}-{:016x}", hasher.finish()),
            command: command.to_string(),
            config,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn finish(mut self, dir: &Path) -> anyhow::Result<()> {
        self.finished_unix = now();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

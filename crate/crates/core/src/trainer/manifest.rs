//! Run manifest written next to every command's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::Result;

/// `git describe` output captured at build time, or the package version
/// when the build ran outside a repository.
pub fn version_string() -> &'static str {
    option_env!("INVIC_GIT_DESCRIBE").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub wall_seconds: f64,
    /// Files the command wrote, relative to the output directory.
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, wall_seconds: f64, outputs: Vec<String>) -> Self {
        Self {
            command: command.into(),
            version: version_string().into(),
            seed: config.train.seed,
            wall_seconds,
            outputs,
            config: *config,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_echoes_config() {
        let cfg = RunConfig::default().with_seed(11);
        let m = Manifest::new("train", &cfg, 1.5, vec!["metrics.jsonl".into()]);
        assert_eq!(m.seed, 11);
        assert!(!m.version.is_empty());
        let back: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}

//! Run manifest written next to every CLI output set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Bumped whenever a CSV column set changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    /// Header of the file when it is a CSV.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub csv_schema_version: u32,
    /// The configuration after defaults and overrides were applied.
    pub config: ConfigFile,
    /// Flags that shaped the run besides the config.
    pub flags: BTreeMap<String, String>,
    pub outputs: Vec<OutputFile>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: ConfigFile) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            config,
            flags: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.flags.insert(name.to_string(), value.to_string());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>, columns: &[&str]) {
        self.outputs.push(OutputFile {
            path: path.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
        });
    }

    /// Write `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("project", ConfigFile::default());
        m.flag("seed", 7);
        m.output("project.csv", &["model", "gpus"]);
        let path = m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }
}

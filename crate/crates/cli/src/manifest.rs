//! Append-only run manifest shared by every stage of a run directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Config file of the first stage that used one.
    pub config: Option<PathBuf>,
    /// Seed of the first seeded stage.
    pub seed: Option<u64>,
    pub legend: Vec<String>,
    pub stages: Vec<StageRecord>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load_or_new(run_dir: &Path, legend: Vec<String>) -> Result<Self, Failure> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: None,
                seed: None,
                legend,
                stages: Vec::new(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::validation(format!("malformed manifest {}: {e}", path.display())))
    }

    /// Latest stage that declared `path` as an output.
    pub fn producer(&self, path: &Path) -> Option<(usize, &StageRecord)> {
        self.stages
            .iter()
            .enumerate()
            .rev()
            .find(|(_, s)| s.outputs.iter().any(|o| o == path))
    }

    pub fn append(&mut self, record: StageRecord, run_dir: &Path) -> Result<(), Failure> {
        if self.config.is_none() {
            self.config = record.config.clone();
        }
        if self.seed.is_none() {
            self.seed = record.seed;
        }
        self.stages.push(record);
        std::fs::create_dir_all(run_dir).map_err(|e| Failure::runtime(format!("{}: {e}", run_dir.display())))?;
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(stage: &str, out: &str) -> StageRecord {
        StageRecord {
            stage: stage.into(),
            config: None,
            inputs: vec![],
            outputs: vec![PathBuf::from(out)],
            seed: Some(3),
            started_unix: 0,
            finished_unix: 0,
        }
    }

    #[test]
    fn appends_and_finds_producers() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::load_or_new(dir.path(), vec!["a".into()]).unwrap();
        m.append(record("synth", "x"), dir.path()).unwrap();
        let mut m = RunManifest::load_or_new(dir.path(), vec![]).unwrap();
        assert_eq!(m.legend, vec!["a".to_string()]);
        m.append(record("tile", "y"), dir.path()).unwrap();
        let back = RunManifest::load_or_new(dir.path(), vec![]).unwrap();
        assert_eq!(back.stages.len(), 2);
        assert_eq!(back.seed, Some(3));
        assert_eq!(back.producer(Path::new("y")).unwrap().0, 1);
        assert!(back.producer(Path::new("z")).is_none());
    }
}

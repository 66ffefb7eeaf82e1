//! Per-directory manifest: config, seed and a content hash per output file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Relative path → SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: Option<ExperimentConfig>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl Manifest {
    pub fn load_or_default(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    /// Records `files` (relative to `dir`) under `stage` and rewrites the
    /// manifest. The stored config has its output path blanked.
    pub fn record(dir: &Path, cfg: &ExperimentConfig, stage: &str, files: &[String]) -> Result<(), CliError> {
        let mut m = Manifest::load_or_default(dir)?;
        let mut c = cfg.clone();
        c.output = Default::default();
        m.seed = cfg.seed;
        m.config = Some(c);
        let mut rec = StageRecord {
            config_hash: cfg.hash(),
            files: BTreeMap::new(),
        };
        for f in files {
            rec.files.insert(f.clone(), sha256_file(&dir.join(f))?);
        }
        m.stages.insert(stage.to_string(), rec);
        std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

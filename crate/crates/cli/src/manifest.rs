//! Run manifests: config snapshot, seeds, artifact hashes, wall-clock totals.

use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RunManifest {
    pub stages: Vec<(String, f64)>,
    pub artifacts: Vec<Artifact>,
    pub notes: Map<String, Value>,
}

impl RunManifest {
    /// Loads an existing manifest so stages run separately accumulate.
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let Ok(text) = std::fs::read_to_string(&path) else {
            return Ok(Self::default());
        };
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let mut m = Self::default();
        for s in v["stages"].as_array().into_iter().flatten() {
            m.stages.push((s["stage"].as_str().unwrap_or("").into(), s["wall_ms"].as_f64().unwrap_or(0.0)));
        }
        for a in v["artifacts"].as_array().into_iter().flatten() {
            m.artifacts.push(Artifact {
                path: a["path"].as_str().unwrap_or("").into(),
                sha256: a["sha256"].as_str().unwrap_or("").into(),
                bytes: a["bytes"].as_u64().unwrap_or(0) as usize,
            });
        }
        if let Some(n) = v["notes"].as_object() {
            m.notes = n.clone();
        }
        Ok(m)
    }

    /// Writes `bytes` to `dir/rel` and records its hash.
    pub fn write(&mut self, dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        std::fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn to_json(&self, cfg: &ExperimentConfig) -> Value {
        let mut artifacts = self.artifacts.clone();
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg.to_pairs(),
            "seeds": {
                "master": cfg.seed,
                "sensing": cfg.sensing_seed,
                "solver": cfg.solver_cfg.seed,
            },
            "stages": self.stages.iter().map(|(s, ms)| json!({"stage": s, "wall_ms": ms})).collect::<Vec<_>>(),
            "wall_ms_total": self.stages.iter().map(|(_, ms)| ms).sum::<f64>(),
            "artifacts": artifacts.iter().map(|a| json!({"path": a.path, "sha256": a.sha256, "bytes": a.bytes})).collect::<Vec<_>>(),
            "notes": self.notes,
        })
    }

    pub fn save(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json(cfg)).map_err(|e| CliError::Invalid(e.to_string()))? + "\n";
        let path = dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(CliError::io(&path))
    }
}

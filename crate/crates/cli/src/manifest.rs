//! Run manifest: per-stage completion records, written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_unix_ms: u128,
    pub wall_clock_s: f64,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Option<Manifest>> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| {
            format!("parsing {}", path.display())
        })?))
    }

    /// Loads the manifest (or starts a fresh one) and refuses to mix
    /// configurations or seeds within one run directory.
    pub fn open_for(out_dir: &Path, config_hash: &str, seed: u64, version: &str) -> Result<Manifest> {
        match Self::load(out_dir)? {
            Some(m) => {
                if m.config_hash != config_hash || m.seed != seed {
                    bail!(
                        "run directory {} was produced by a different config/seed \
                         (manifest hash {} seed {}, current hash {} seed {})",
                        out_dir.display(),
                        m.config_hash,
                        m.seed,
                        config_hash,
                        seed
                    );
                }
                Ok(m)
            }
            None => Ok(Manifest {
                config_hash: config_hash.to_string(),
                seed,
                artifact_version: version.to_string(),
                stages: BTreeMap::new(),
            }),
        }
    }

    pub fn record_stage(
        &mut self,
        out_dir: &Path,
        stage: &str,
        wall_clock_s: f64,
        outputs: &[(&str, &Path)],
    ) -> Result<()> {
        let record = StageRecord {
            completed_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_millis(),
            wall_clock_s,
            outputs: outputs
                .iter()
                .map(|(k, p)| (k.to_string(), p.display().to_string()))
                .collect(),
        };
        self.stages.insert(stage.to_string(), record);
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&Self::path(out_dir), text.as_bytes())
    }
}

/// Write via a temp file + rename so readers never observe a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use kpred_core::{ArchConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Training run description, loaded from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory written by `gen-data`.
    pub data: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Checkpoint to start from. Required by `train-retrieval` and `train-partial`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Network architecture. Ignored fields are not allowed; when a checkpoint
    /// is given this must match its `arch.json` exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsa: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dar: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lgf: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cb: Option<bool>,
}

impl RunConfig {
    /// Reads, validates and resolves relative paths against the config's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.data = resolve(&cfg.data);
        cfg.out = resolve(&cfg.out);
        cfg.checkpoint = cfg.checkpoint.as_deref().map(resolve);
        if let Some(dar) = cfg.dar {
            cfg.train.dar = dar;
        }
        if let Some(cb) = cfg.cb {
            cfg.train.cb = cb;
        }
        cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    /// Architecture for a fresh bundle, with the ablation flags applied.
    pub fn fresh_arch(&self) -> anyhow::Result<ArchConfig> {
        let mut arch = self.arch.clone().unwrap_or_default();
        if let Some(gsa) = self.gsa {
            arch.gsa = gsa;
        }
        if let Some(lgf) = self.lgf {
            arch.lgf = lgf;
        }
        arch.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(arch)
    }
}

pub const LOCK_FILE: &str = "config.lock.json";

/// Echoes the effective configuration into an output directory.
pub fn write_lock<T: Serialize>(dir: &Path, value: &T) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(LOCK_FILE);
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected_and_paths_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"data": "d", "out": "o", "typo": 1}"#).unwrap();
        assert!(RunConfig::load(&p).unwrap_err().downcast_ref::<UsageError>().is_some());

        fs::write(&p, r#"{"data": "d", "out": "/abs", "cb": false, "train": {"epochs": 0}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.data, dir.path().join("d"));
        assert_eq!(c.out, PathBuf::from("/abs"));
        assert!(!c.train.cb);
        assert_eq!(c.train.epochs, 0);
    }

    #[test]
    fn flags_override_arch() {
        let c: RunConfig = serde_json::from_str(r#"{"data": "d", "out": "o", "gsa": false}"#).unwrap();
        assert!(!c.fresh_arch().unwrap().gsa);
        assert!(c.fresh_arch().unwrap().lgf);
    }
}

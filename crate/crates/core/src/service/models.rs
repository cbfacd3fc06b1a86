//! Checkpoint discovery for `GET /api/models`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::train::{CheckpointManifest, Phase, MANIFEST_FILE};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelEntry {
    /// Directory name below the models directory; what requests refer to.
    pub name: String,
    /// "fgss", "unet" or "featx".
    pub variant: String,
    pub params: usize,
    pub summary: ManifestSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestSummary {
    pub display_name: String,
    pub phase: Phase,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub tile_side: Option<usize>,
    pub config_hash: String,
    pub created_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelWarning {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ModelListing {
    pub models: Vec<ModelEntry>,
    pub warnings: Vec<ModelWarning>,
}

/// True for names that stay inside the models directory.
pub fn valid_model_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

pub fn model_path(dir: &Path, name: &str) -> Option<PathBuf> {
    valid_model_name(name).then(|| dir.join(name))
}

fn entry(name: String, m: &CheckpointManifest) -> ModelEntry {
    let seg = m.config_snapshot.segmenter.as_ref();
    let variant = match seg {
        Some(s) => serde_json::to_value(s.variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        None => "featx".into(),
    };
    let best_metric = m
        .best_epoch
        .and_then(|e| m.metric_history.get(e))
        .and_then(|row| row.val_metric(m.phase));
    ModelEntry {
        name,
        variant,
        params: m.parameter_count,
        summary: ManifestSummary {
            display_name: m.model_name(),
            phase: m.phase,
            epochs: m.epoch,
            best_epoch: m.best_epoch,
            best_metric,
            tile_side: seg.map(|s| s.tile_side),
            config_hash: m.config_hash.clone(),
            created_unix: m.created_unix,
        },
    }
}

/// Every subdirectory holding a manifest, in name order. Manifests that fail
/// to load or validate become warnings.
pub fn list_models(dir: &Path) -> ModelListing {
    let mut out = ModelListing::default();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            out.warnings.push(ModelWarning {
                name: dir.display().to_string(),
                reason: e.to_string(),
            });
            return out;
        }
    };
    let mut dirs: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
        .collect();
    dirs.sort();
    for (name, path) in dirs {
        match CheckpointManifest::load(&path) {
            Ok((m, _)) => out.models.push(entry(name, &m)),
            Err(e) => out.warnings.push(ModelWarning {
                name,
                reason: e.to_string(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cannot_escape() {
        assert!(valid_model_name("fgss16_toy-1.2"));
        for bad in ["", ".", "..", "a/b", "../x", "a\\b"] {
            assert!(!valid_model_name(bad), "{bad}");
        }
    }

    #[test]
    fn empty_and_missing_dirs() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(list_models(d.path()), ModelListing::default());
        let l = list_models(&d.path().join("missing"));
        assert!(l.models.is_empty());
        assert_eq!(l.warnings.len(), 1);
    }

    #[test]
    fn corrupt_manifest_is_a_warning() {
        let d = tempfile::tempdir().unwrap();
        let m = d.path().join("broken");
        std::fs::create_dir(&m).unwrap();
        std::fs::write(m.join(MANIFEST_FILE), b"{not json").unwrap();
        let l = list_models(d.path());
        assert!(l.models.is_empty());
        assert_eq!(l.warnings[0].name, "broken");
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_json, EssNetTrainConfig, UNetTrainConfig, CHECKPOINTS_DIR};
use crate::dataset::SamplerState;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{ArchConfig, Model};
use crate::nn::Adam;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Essnet,
    Synthesize,
    Unet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub created_by: String,
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub image_size: u32,
    pub networks: BTreeMap<String, ArchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub essnet: Option<EssNetTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unet: Option<UNetTrainConfig>,
}

impl CheckpointManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::json("checkpoint manifest", e))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint schema version {v} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("checkpoint manifest lacks schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::json("checkpoint manifest", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint manifest serializes")
    }

    /// Checks that network `name` was saved with exactly `expected`.
    pub fn check_network(&self, name: &str, expected: &ArchConfig) -> Result<()> {
        let saved = self
            .networks
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint holds no network `{name}`")))?;
        if saved == expected {
            return Ok(());
        }
        Err(Error::Checkpoint(format!(
            "network `{name}` does not match the requested architecture: {}",
            describe_difference(saved, expected)
        )))
    }
}

fn describe_difference(saved: &ArchConfig, expected: &ArchConfig) -> String {
    let a = serde_json::to_value(saved).unwrap_or_default();
    let b = serde_json::to_value(expected).unwrap_or_default();
    match (a.as_object(), b.as_object()) {
        (Some(a), Some(b)) => {
            let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter()
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| {
                    let show = |v: Option<&serde_json::Value>| v.map_or("absent".to_string(), |v| v.to_string());
                    format!("{k}: checkpoint {}, requested {}", show(a.get(k)), show(b.get(k)))
                })
                .collect::<Vec<_>>()
                .join(", ")
        }
        _ => format!("checkpoint {a}, requested {b}"),
    }
}

fn weights_file(name: &str) -> String {
    format!("{name}.safetensors")
}

fn adam_file(name: &str) -> String {
    format!("{name}.adam.safetensors")
}

/// Writes a checkpoint directory atomically (staged under a temporary name,
/// then renamed).
pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, nets: &[(&str, &Model, Option<&Adam>)]) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (name, model, opt) in nets {
        model.params().save(&staging.join(weights_file(name)))?;
        if let Some(opt) = opt {
            opt.save(&staging.join(adam_file(name)))?;
        }
    }
    write_json(&staging.join(MANIFEST), manifest, "checkpoint manifest")?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    CheckpointManifest::from_json(&text)
}

/// Loads network `name` into `model` (and its optimizer moments into `opt`)
/// after checking the saved architecture matches the model's.
pub(crate) fn load_network(
    dir: &Path,
    manifest: &CheckpointManifest,
    name: &str,
    model: &mut Model,
    opt: Option<&mut Adam>,
) -> Result<()> {
    manifest.check_network(name, model.config())?;
    model.params_mut().load(&dir.join(weights_file(name)))?;
    if let Some(opt) = opt {
        let path = dir.join(adam_file(name));
        if !path.exists() {
            return Err(Error::Checkpoint(format!("{}: missing optimizer state", path.display())));
        }
        opt.load(&path)?;
    }
    Ok(())
}

/// Checkpoint directories under `<out>/checkpoints`, oldest first.
pub fn list_checkpoints(out_dir: &Path) -> Vec<(usize, PathBuf)> {
    let root = out_dir.join(CHECKPOINTS_DIR);
    let Ok(read) = std::fs::read_dir(&root) else {
        return Vec::new();
    };
    let mut found: Vec<(usize, PathBuf)> = read
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("epoch_")?.parse().ok()?;
            let path = e.path();
            path.join(MANIFEST).is_file().then_some((epoch, path))
        })
        .collect();
    found.sort();
    found
}

pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    list_checkpoints(out_dir).pop().map(|(_, p)| p)
}

/// Accepts either a checkpoint directory or a training output directory
/// (resolved to its latest checkpoint).
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint found at {}", path.display())))
}

pub(crate) fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINTS_DIR).join(format!("epoch_{epoch:04}"))
}

/// Deletes all but the newest `keep` checkpoints.
pub(crate) fn prune_checkpoints(out_dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(out_dir);
    let excess = all.len().saturating_sub(keep);
    for (_, path) in all.into_iter().take(excess) {
        std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_generator, GeneratorConfig};

    fn manifest() -> CheckpointManifest {
        let mut networks = BTreeMap::new();
        networks.insert("g1".to_string(), ArchConfig::Generator(GeneratorConfig::generator(4, 1)));
        CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            created_by: crate::dataset::tool_version(),
            stage: Stage::Essnet,
            epoch: 1,
            step: 3,
            seed: 9,
            image_size: 16,
            networks,
            loss_weights: Some(LossWeights::default()),
            sampler: Some(SamplerState::new(9)),
            essnet: None,
            unet: None,
        }
    }

    #[test]
    fn manifest_round_trip_and_schema_check() {
        let m = manifest();
        assert_eq!(CheckpointManifest::from_json(&m.to_json()).unwrap(), m);
        let bumped = m.to_json().replace("\"schema_version\": 1", "\"schema_version\": 99");
        let err = CheckpointManifest::from_json(&bumped).unwrap_err().to_string();
        assert!(err.contains("schema version 99"), "{err}");
    }

    #[test]
    fn save_load_and_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = checkpoint_dir(dir.path(), 1);
        let g = build_generator(&GeneratorConfig::generator(4, 1), 5).unwrap();
        save_checkpoint(&ckpt, &manifest(), &[("g1", &g, None)]).unwrap();
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), ckpt);
        let m = load_checkpoint_manifest(&ckpt).unwrap();

        let mut same = build_generator(&GeneratorConfig::generator(4, 1), 6).unwrap();
        load_network(&ckpt, &m, "g1", &mut same, None).unwrap();
        let mut wider = build_generator(&GeneratorConfig::generator(8, 1), 6).unwrap();
        let err = load_network(&ckpt, &m, "g1", &mut wider, None).unwrap_err().to_string();
        assert!(err.contains("base_width: checkpoint 4, requested 8"), "{err}");
    }

    #[test]
    fn prune_keeps_newest() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_generator(&GeneratorConfig::generator(4, 1), 5).unwrap();
        for e in [10, 20, 30, 40] {
            save_checkpoint(&checkpoint_dir(dir.path(), e), &manifest(), &[("g1", &g, None)]).unwrap();
        }
        prune_checkpoints(dir.path(), 3).unwrap();
        let epochs: Vec<usize> = list_checkpoints(dir.path()).into_iter().map(|(e, _)| e).collect();
        assert_eq!(epochs, vec![20, 30, 40]);
    }
}

//! Checkpoints: one safetensors archive of every named tensor, with the JSON manifest stored
//! in the archive metadata under `manifest`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::appearance::{tensor_from_view, BackboneConfig};
use crate::model::{ModelConfig, SeqMasksModel};
use crate::nn::group_of;
use crate::dataset::AugmentConfig;
use crate::trainer::config::{config_hash, ExtractConfig, Regime, TrainConfig, SPEC_VERSION};

const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec_version: String,
    pub config_hash: String,
    pub regime: Regime,
    pub epoch: usize,
    pub step: usize,
    pub components: Vec<String>,
    pub dims: BTreeMap<String, usize>,
    pub metrics: BTreeMap<String, f64>,
    pub model: ModelConfig,
    /// Frame and mask geometry the model was trained on.
    #[serde(default)]
    pub input: AugmentConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
}

impl CheckpointManifest {
    pub fn for_model(model: &SeqMasksModel, cfg: &TrainConfig, epoch: usize, step: usize) -> Self {
        Self {
            spec_version: SPEC_VERSION.into(),
            config_hash: config_hash(&model.config),
            regime: cfg.regime,
            epoch,
            step,
            components: model.active_groups(),
            dims: model.config.dims(),
            metrics: BTreeMap::new(),
            model: model.config.clone(),
            input: cfg.augment.clone(),
            extract: cfg.extract.clone(),
        }
    }
}

/// Group a named dimension belongs to, for error reports.
fn dim_component(dim: &str) -> &'static str {
    match dim {
        "backbone_channels" => "backbone",
        "bottleneck_hidden" | "embed" => "global_bottleneck",
        "gait_head" => "gait_heads",
        "descriptor" => "ffm",
        "num_classes" => "classifiers",
        _ => "model",
    }
}

pub fn save_checkpoint(path: &Path, model: &SeqMasksModel, manifest: &CheckpointManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tensors: Vec<(String, Tensor)> = model.store.snapshot().into_iter().collect();
    let metadata = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?)]);
    safetensors::serialize_to_file(tensors, Some(metadata), path)?;
    Ok(())
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let manifest_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint {
            component: "manifest".into(),
            reason: format!("{} carries no manifest", path.display()),
        })?;
    let manifest: CheckpointManifest = serde_json::from_str(manifest_json)?;
    if manifest.spec_version != SPEC_VERSION {
        return Err(Error::Checkpoint {
            component: "manifest".into(),
            reason: format!("spec_version `{}` (expected `{SPEC_VERSION}`)", manifest.spec_version),
        });
    }
    let file = safetensors::SafeTensors::deserialize(&bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in file.tensors() {
        let t = tensor_from_view(&view).map_err(|reason| Error::Checkpoint {
            component: group_of(&name).to_string(),
            reason,
        })?;
        tensors.insert(name, t);
    }
    Ok(Checkpoint { manifest, tensors })
}

/// Checks that a manifest's dimensions agree with `config`, naming the first mismatching
/// component.
pub fn check_compatible(manifest: &CheckpointManifest, config: &ModelConfig) -> Result<()> {
    let expected = config.dims();
    for (k, v) in &expected {
        if let Some(found) = manifest.dims.get(k) {
            if found != v {
                return Err(Error::Checkpoint {
                    component: dim_component(k).into(),
                    reason: format!("dimension `{k}` is {found} in the checkpoint, configuration expects {v}"),
                });
            }
        }
    }
    Ok(())
}

/// Full restore: every model group must be present and every tensor must fit.
pub fn restore(model: &SeqMasksModel, ckpt: &Checkpoint) -> Result<()> {
    check_compatible(&ckpt.manifest, &model.config)?;
    for g in model.active_groups() {
        if !ckpt.manifest.components.contains(&g) {
            return Err(Error::Checkpoint {
                component: g,
                reason: "missing from checkpoint".into(),
            });
        }
    }
    model.store.load(&ckpt.tensors)
}

/// Restores only tensors whose group is in `groups`, plus classifier tensors named in
/// `classifiers`. Each listed group must be present in the checkpoint.
pub fn restore_groups(
    model: &SeqMasksModel,
    ckpt: &Checkpoint,
    groups: &[&str],
    classifiers: &[&str],
) -> Result<usize> {
    let mut selected = BTreeMap::new();
    for &g in groups {
        if !model.active_groups().iter().any(|a| a == g) {
            continue;
        }
        let found: Vec<_> = ckpt.tensors.iter().filter(|(n, _)| group_of(n) == g).collect();
        if found.is_empty() {
            return Err(Error::Checkpoint {
                component: g.into(),
                reason: "component checkpoint does not contain this group".into(),
            });
        }
        for (n, t) in found {
            selected.insert(n.clone(), t.clone());
        }
    }
    for &c in classifiers {
        let prefix = format!("classifiers.{c}.");
        for (n, t) in ckpt.tensors.iter().filter(|(n, _)| n.starts_with(&prefix)) {
            if model.store.get(n).is_some_and(|v| v.dims() == t.dims()) {
                selected.insert(n.clone(), t.clone());
            }
        }
    }
    model.store.load(&selected)?;
    Ok(selected.len())
}

/// Builds a model from a checkpoint alone (eval and extraction).
pub fn load_model(path: &Path) -> Result<(SeqMasksModel, CheckpointManifest)> {
    let ckpt = read_checkpoint(path)?;
    let mut config = ckpt.manifest.model.clone();
    // weights come from the checkpoint, never from the original pretrained file
    if let BackboneConfig::Resnet50 { weights } = &mut config.backbone {
        *weights = None;
    }
    let dtype = ckpt
        .tensors
        .values()
        .next()
        .map(|t| t.dtype())
        .unwrap_or(candle_core::DType::F32);
    let model = SeqMasksModel::new(&config, 0, dtype)?;
    restore(&model, &ckpt)?;
    Ok((model, ckpt.manifest))
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_archive, save_archive};
use crate::nn::{DetectionTransformer, ModelConfig, ParamStore, Tensor};

/// Subdirectory of a run that holds its latest checkpoint.
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Everything needed to continue a run: weights, optimizer moments, config
/// and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DetectionTransformer,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(model: DetectionTransformer, config: TrainConfig) -> Self {
        let optimizer = AdamW::new(model.params(), config.weight_decay);
        Self {
            model,
            optimizer,
            config,
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: usize,
    adam_t: u64,
    /// Random streams are keyed by seed and counters, so this is the full
    /// generator state.
    rng: RngState,
}

/// Writes the state into `dir`, replacing any previous checkpoint only once
/// the new one is complete.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    let meta = Meta {
        model: state.model.config().clone(),
        train: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.optimizer.t,
        rng: RngState {
            seed: state.config.seed,
            epoch: state.epoch,
        },
    };
    let params = state.model.params();
    let mut tensors: Vec<(String, &Tensor)> = params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    for (id, name, _) in params.iter() {
        tensors.push((format!("adam.m.{name}"), &state.optimizer.m[id.index()]));
        tensors.push((format!("adam.v.{name}"), &state.optimizer.v[id.index()]));
    }
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    save_archive(&tmp, serde_json::to_value(&meta).expect("meta serializes"), &tensors)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let (meta, tensors) = load_archive(dir)?;
    let meta: Meta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", dir.display())))?;
    let mut params = ParamStore::new();
    let mut moments = std::collections::HashMap::new();
    for (name, t) in tensors {
        if name.starts_with("adam.") {
            moments.insert(name, t);
        } else {
            params.register(name, t);
        }
    }
    let model = DetectionTransformer::from_params(meta.model, params)?;
    let mut optimizer = AdamW::new(model.params(), meta.train.weight_decay);
    optimizer.t = meta.adam_t;
    for (id, name, _) in model.params().iter() {
        for (kind, slot) in [("m", &mut optimizer.m), ("v", &mut optimizer.v)] {
            let key = format!("adam.{kind}.{name}");
            let t = moments
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
            if t.shape() != slot[id.index()].shape() {
                return Err(Error::Checkpoint(format!("{key} has the wrong shape")));
            }
            slot[id.index()] = t;
        }
    }
    Ok(TrainState {
        model,
        optimizer,
        config: meta.train,
        epoch: meta.epoch,
        step: meta.step,
    })
}

/// Loads only the model of a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<DetectionTransformer> {
    load_state(dir).map(|s| s.model)
}

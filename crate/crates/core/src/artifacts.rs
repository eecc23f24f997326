//! Checkpoint metadata, model reconstruction from checkpoints, and training
//! history files.

use std::fmt::Write as _;
use std::path::Path;

use provnet_engine::layers::{BN_EPS, BN_MOMENTUM};
use provnet_engine::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::models::{MultiFrameNet, StreamConfig, StreamNet};
use crate::train::{EpochRecord, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelSpec {
    Stream {
        config: StreamConfig,
    },
    Multi {
        ind: StreamConfig,
        pred: StreamConfig,
        hidden: Vec<usize>,
    },
}

impl ModelSpec {
    pub fn class_names(&self) -> &[String] {
        match self {
            ModelSpec::Stream { config } => &config.class_names,
            ModelSpec::Multi { ind, .. } => &ind.class_names,
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            ModelSpec::Stream { config } => config.fingerprint(),
            ModelSpec::Multi { ind, pred, hidden } => {
                format!("{}+{}+{hidden:?}", ind.fingerprint(), pred.fingerprint())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub fingerprint: String,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub tool_version: String,
}

impl CheckpointMeta {
    pub fn new(spec: ModelSpec, train: TrainConfig, best_epoch: usize, val_acc: f64) -> Self {
        Self {
            fingerprint: spec.fingerprint(),
            spec,
            bn_momentum: BN_MOMENTUM,
            bn_eps: BN_EPS,
            train,
            best_epoch,
            val_acc,
            tool_version: TOOL_VERSION.to_owned(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metadata serializes")
    }

    pub fn parse(checkpoint: &Checkpoint) -> Result<Self> {
        let meta: Self = serde_json::from_str(&checkpoint.metadata)
            .map_err(|e| Error::Input(format!("checkpoint metadata: {e}")))?;
        if meta.fingerprint != meta.spec.fingerprint() {
            return Err(Error::Input("checkpoint fingerprint does not match its model spec".into()));
        }
        Ok(meta)
    }
}

/// Either kind of trained model, rebuilt from a checkpoint.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Stream(StreamNet),
    Multi(MultiFrameNet),
}

impl LoadedModel {
    pub fn class_names(&self) -> Vec<String> {
        match self {
            LoadedModel::Stream(n) => n.config.class_names.clone(),
            LoadedModel::Multi(n) => n.class_names().to_vec(),
        }
    }
}

pub fn load_model(checkpoint: &Checkpoint) -> Result<(CheckpointMeta, LoadedModel)> {
    let meta = CheckpointMeta::parse(checkpoint)?;
    let model = match &meta.spec {
        ModelSpec::Stream { config } => {
            let mut net = StreamNet::new(config.clone(), 0)?;
            net.import_state(&checkpoint.tensors)?;
            LoadedModel::Stream(net)
        }
        ModelSpec::Multi { ind, pred, hidden } => {
            let mut net = MultiFrameNet::new(StreamNet::new(ind.clone(), 0)?, StreamNet::new(pred.clone(), 0)?, hidden, 0)?;
            net.import_state(&checkpoint.tensors)?;
            LoadedModel::Multi(net)
        }
    };
    Ok((meta, model))
}

pub fn load_model_file(path: &Path) -> Result<(CheckpointMeta, LoadedModel)> {
    if !path.is_file() {
        return Err(Error::Input(format!("checkpoint {} not found", path.display())));
    }
    load_model(&Checkpoint::load(path)?)
}

/// One JSON object per epoch: `{"epoch":..,"train_loss":..,"val_acc":..}`.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in history {
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_jsonl(history)).at(path)
}

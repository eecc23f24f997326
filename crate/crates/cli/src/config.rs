//! Run configuration: one TOML document, flags applied on top.

use std::path::{Path, PathBuf};

use provnet_core::ingest::SplitBy;
use provnet_core::models::{ArchProfile, FreezeScope};
use provnet_core::pipeline::IngestConfig;
use provnet_core::synth::GenConfig;
use provnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to generation, ingest and training; overrides section seeds.
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub gen: GenConfig,
    pub infer: InferConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output of `gen`; also where the sidecar and labels default to.
    pub data: PathBuf,
    pub sidecar: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Patch store and manifest written by `ingest`.
    pub store: PathBuf,
    /// Checkpoints, histories and evaluation reports.
    pub checkpoints: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            sidecar: None,
            labels: None,
            store: "store".into(),
            checkpoints: "runs".into(),
        }
    }
}

impl Paths {
    pub fn sidecar(&self) -> PathBuf {
        self.sidecar.clone().unwrap_or_else(|| self.data.join("sidecar.csv"))
    }

    pub fn labels(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.data.join("labels.csv"))
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data);
        fix(&mut self.store);
        fix(&mut self.checkpoints);
        if let Some(p) = self.sidecar.as_mut() {
            fix(p);
        }
        if let Some(p) = self.labels.as_mut() {
            fix(p);
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub profile: ArchProfile,
    /// Hidden widths of the fused head; defaults to [512] (full) or [64]
    /// (reduced).
    pub multi_hidden: Option<Vec<usize>>,
}

impl ArchConfig {
    pub fn multi_hidden(&self) -> Vec<usize> {
        self.multi_hidden.clone().unwrap_or_else(|| match self.profile {
            ArchProfile::Full => vec![512],
            ArchProfile::Reduced => vec![64],
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Stream checkpoint to start from; unset trains from scratch.
    pub from: Option<PathBuf>,
    pub freeze: String,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            from: None,
            freeze: "conv_blocks".into(),
        }
    }
}

impl TransferConfig {
    pub fn scope(&self) -> Result<FreezeScope, CliError> {
        self.freeze.parse::<FreezeScope>().map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Folder of `.patch` files from one video.
    pub patches: Option<PathBuf>,
}

/// Flag values that override the config document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub split_by: Option<SplitBy>,
    pub triplet_stride: Option<usize>,
    pub devices: Option<Vec<String>>,
}

impl RunConfig {
    /// Reads `path` (or defaults), resolves relative paths against the
    /// document's folder and applies the flag overrides.
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                let base = p.parent().filter(|b| !b.as_os_str().is_empty()).unwrap_or(Path::new("."));
                cfg.paths.rebase(base);
                if let Some(t) = cfg.transfer.from.as_mut() {
                    if t.is_relative() {
                        *t = base.join(&*t);
                    }
                }
                if let Some(t) = cfg.infer.patches.as_mut() {
                    if t.is_relative() {
                        *t = base.join(&*t);
                    }
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(s) = o.split_by {
            cfg.ingest.split_by = s;
        }
        if let Some(s) = o.triplet_stride {
            cfg.ingest.triplet_stride = s;
        }
        if let Some(d) = &o.devices {
            cfg.ingest.devices = d.clone();
        }
        cfg.gen.seed = cfg.seed;
        cfg.ingest.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

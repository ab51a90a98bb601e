//! JSON checkpoints: a header with the model configuration, then one entry
//! per model part holding its layers as row-major tensors.

use std::collections::BTreeMap;
use std::path::Path;

use femloc_core::federation::MetaModel;
use femloc_core::model::{ClientModel, ModelConfig, Part};
use femloc_core::nn::{Mlp, Optimizer};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{AppError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub round: u64,
    pub outer_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Keyed by part name ("encoder", "decoder", "meta", "mapper").
    pub parts: BTreeMap<String, Mlp>,
    /// Server optimizer state, present for meta-model checkpoints.
    #[serde(default)]
    pub server_optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn from_meta(model: &ModelConfig, meta: &MetaModel) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.clone(),
                round: meta.round,
                outer_lr: meta.outer_lr,
            },
            parts: BTreeMap::from([(Part::Meta.name().to_string(), meta.theta.clone())]),
            server_optimizer: Some(meta.optimizer.clone()),
        }
    }

    pub fn from_client(model: &ClientModel, round: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                round,
                outer_lr: 0.0,
            },
            parts: Part::ALL.iter().map(|&p| (p.name().to_string(), model.net(p).clone())).collect(),
            server_optimizer: None,
        }
    }

    pub fn meta_model(&self) -> Option<MetaModel> {
        let theta = self.parts.get(Part::Meta.name())?.clone();
        let optimizer = self.server_optimizer.clone().unwrap_or(Optimizer::Sgd);
        Some(MetaModel { theta, round: self.header.round, outer_lr: self.header.outer_lr, optimizer })
    }

    /// Meta part, checked against `config` so a mismatch names the offending
    /// dimension instead of failing deep inside training.
    pub fn theta_for(&self, config: &ModelConfig, path: &Path) -> Result<Mlp> {
        let theta = self
            .parts
            .get(Part::Meta.name())
            .ok_or_else(|| AppError::format(path, "checkpoint has no meta part"))?;
        let (d, n) = (theta.input_dim(), theta.output_dim());
        if d != config.latent_dim || n != config.feature_dim {
            return Err(AppError::Config(format!(
                "{}: checkpoint meta-model maps d={d} to n={n}, config expects d={} to n={} (p={})",
                path.display(),
                config.latent_dim,
                config.feature_dim,
                config.coord_dim
            )));
        }
        if !theta.same_shape(&config.init_meta(0)?) {
            return Err(AppError::Config(format!(
                "{}: checkpoint meta-model hidden widths differ from config {:?}",
                path.display(),
                config.meta_hidden
            )));
        }
        Ok(theta.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.header.format_version != FORMAT_VERSION {
            return Err(AppError::format(path, format!("unsupported checkpoint version {}", ckpt.header.format_version)));
        }
        Ok(ckpt)
    }
}

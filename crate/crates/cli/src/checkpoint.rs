//! Model checkpoints: a binary container of parameters and batch-norm
//! statistics, plus a JSON sidecar describing how the model was built and
//! trained.

use std::path::{Path, PathBuf};

use lowalt_core::learning::{ModelInput, PriorKind, RefinerConfig, RefinerModel, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::binary::{bytes_to_f32, decode, encode, f32_bytes, write_atomic, FORMAT_VERSION};
use crate::error::CliError;
use crate::schema::{PriorJson, TrainJson};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputJson {
    Image { channels: usize },
    Vector { len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureJson {
    pub height: usize,
    pub width: usize,
    pub input: InputJson,
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl From<&RefinerConfig> for ArchitectureJson {
    fn from(c: &RefinerConfig) -> Self {
        ArchitectureJson {
            height: c.height,
            width: c.width,
            input: match c.input {
                ModelInput::Image { channels } => InputJson::Image { channels },
                ModelInput::Vector { len } => InputJson::Vector { len },
            },
            stem_width: c.stem_width,
            block_widths: c.block_widths.clone(),
            bn_momentum: c.bn_momentum,
            bn_eps: c.bn_eps,
        }
    }
}

impl From<&ArchitectureJson> for RefinerConfig {
    fn from(a: &ArchitectureJson) -> Self {
        RefinerConfig {
            height: a.height,
            width: a.width,
            input: match a.input {
                InputJson::Image { channels } => ModelInput::Image { channels },
                InputJson::Vector { len } => ModelInput::Vector { len },
            },
            stem_width: a.stem_width,
            block_widths: a.block_widths.clone(),
            bn_momentum: a.bn_momentum,
            bn_eps: a.bn_eps,
        }
    }
}

/// Everything needed to rebuild and audit a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub architecture: ArchitectureJson,
    /// Inputs are divided by this before the network sees them.
    pub input_scale: f64,
    pub prior: PriorJson,
    pub train: TrainJson,
    pub threshold: f64,
    pub init_seed: u64,
    pub dataset_hash: String,
    pub config_hash: String,
    pub optimizer: String,
    pub schedule: String,
    pub init: String,
    pub best_epoch: usize,
    pub n_params: usize,
    pub n_stats: usize,
}

pub const OPTIMIZER: &str = "adam beta1=0.9 beta2=0.999 eps=1e-8";
pub const SCHEDULE: &str = "cosine from learning_rate to learning_rate*final_lr_fraction, per step";
pub const INIT: &str = "he-normal; head weights x0.05, head bias 0.1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    format: String,
    version: u32,
    dtype: String,
    n_params: usize,
    n_stats: usize,
}

/// Path of the sidecar belonging to `weights`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

#[allow(clippy::too_many_arguments)]
pub fn make_sidecar(
    model: &RefinerModel<f32>,
    prior: PriorKind,
    train: &TrainJson,
    config: &TrainConfig,
    init_seed: u64,
    dataset_hash: &str,
    config_hash: &str,
    best_epoch: usize,
) -> Sidecar {
    Sidecar {
        format: "checkpoint".into(),
        version: FORMAT_VERSION,
        architecture: model.config().into(),
        input_scale: model.input_scale(),
        prior: prior.into(),
        train: train.clone(),
        threshold: config.threshold,
        init_seed,
        dataset_hash: dataset_hash.into(),
        config_hash: config_hash.into(),
        optimizer: OPTIMIZER.into(),
        schedule: SCHEDULE.into(),
        init: INIT.into(),
        best_epoch,
        n_params: model.params().len(),
        n_stats: model.stats().len(),
    }
}

/// Writes `weights` and its sidecar next to it.
pub fn save_checkpoint(weights: &Path, model: &RefinerModel<f32>, sidecar: &Sidecar) -> Result<(), CliError> {
    let header = WeightsHeader {
        format: "checkpoint-weights".into(),
        version: FORMAT_VERSION,
        dtype: "float32".into(),
        n_params: model.params().len(),
        n_stats: model.stats().len(),
    };
    let mut payload = f32_bytes(model.params());
    payload.extend(f32_bytes(model.stats()));
    write_atomic(weights, &encode(&header, &payload))?;
    let json = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path(weights), &json)
}

pub fn load_checkpoint(weights: &Path) -> Result<(RefinerModel<f32>, Sidecar), CliError> {
    let side_path = sidecar_path(weights);
    let sidecar: Sidecar = crate::schema::read_json(&side_path)?;
    if sidecar.format != "checkpoint" || sidecar.version != FORMAT_VERSION {
        return Err(CliError::format(&side_path, "not a supported checkpoint sidecar"));
    }
    let bytes = std::fs::read(weights).map_err(|e| CliError::io(weights, e))?;
    let (h, payload): (WeightsHeader, _) = decode(weights, &bytes)?;
    if h.format != "checkpoint-weights" || h.version != FORMAT_VERSION {
        return Err(CliError::format(weights, "not a supported checkpoint"));
    }
    if (h.n_params, h.n_stats) != (sidecar.n_params, sidecar.n_stats) {
        return Err(CliError::format(weights, "weights and sidecar disagree on sizes"));
    }
    let mut values = bytes_to_f32(weights, &payload, h.n_params + h.n_stats)?;
    let stats = values.split_off(h.n_params);
    let mut model = RefinerModel::from_parts((&sidecar.architecture).into(), values, stats)?;
    model.set_input_scale(sidecar.input_scale);
    Ok((model, sidecar))
}

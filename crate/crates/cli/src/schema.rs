//! JSON schemas for scenes and experiment specs.
//!
//! System keys are flat (`n_bs`, `bs_height_m`, ...); a scene file adds
//! `grid` and `targets`. Unknown keys are rejected, and validation errors
//! carry the JSON path of the offending key.

use std::path::Path;

use lowalt_core::imaging::SpOptions;
use lowalt_core::learning::{PriorKind, TrainConfig};
use lowalt_core::scene::{Scene, SystemConfig, Target, VoxelGrid};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Version of the experiment and scene schema.
pub const SCHEMA_VERSION: u32 = 1;

fn default_gain() -> f64 {
    1.0
}

fn is_unit(x: &f64) -> bool {
    *x == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemJson {
    pub n_bs: usize,
    pub bs_height_m: f64,
    pub bs_spacing_m: f64,
    pub upa_side: usize,
    pub center_freq_hz: f64,
    pub n_subcarriers: usize,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    #[serde(default = "default_gain", skip_serializing_if = "is_unit")]
    pub aperture_gain: f64,
}

impl Default for SystemJson {
    fn default() -> Self {
        SystemConfig::default().into()
    }
}

impl From<SystemConfig> for SystemJson {
    fn from(c: SystemConfig) -> Self {
        SystemJson {
            n_bs: c.n_bs,
            bs_height_m: c.bs_height_m,
            bs_spacing_m: c.bs_spacing_m,
            upa_side: c.upa_side,
            center_freq_hz: c.center_freq_hz,
            n_subcarriers: c.n_subcarriers,
            bandwidth_hz: c.bandwidth_hz,
            tx_power_dbm: c.tx_power_dbm,
            noise_power_dbm: c.noise_power_dbm,
            aperture_gain: c.aperture_gain,
        }
    }
}

impl From<&SystemJson> for SystemConfig {
    fn from(j: &SystemJson) -> Self {
        SystemConfig {
            n_bs: j.n_bs,
            bs_height_m: j.bs_height_m,
            bs_spacing_m: j.bs_spacing_m,
            upa_side: j.upa_side,
            center_freq_hz: j.center_freq_hz,
            n_subcarriers: j.n_subcarriers,
            bandwidth_hz: j.bandwidth_hz,
            tx_power_dbm: j.tx_power_dbm,
            noise_power_dbm: j.noise_power_dbm,
            aperture_gain: j.aperture_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridJson {
    pub origin: [f64; 3],
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl From<&VoxelGrid> for GridJson {
    fn from(g: &VoxelGrid) -> Self {
        GridJson {
            origin: g.origin,
            nx: g.nx,
            ny: g.ny,
            nz: g.nz,
            dx: g.dx,
            dy: g.dy,
            dz: g.dz,
        }
    }
}

impl From<&GridJson> for VoxelGrid {
    fn from(g: &GridJson) -> Self {
        VoxelGrid {
            origin: g.origin,
            nx: g.nx,
            ny: g.ny,
            nz: g.nz,
            dx: g.dx,
            dy: g.dy,
            dz: g.dz,
        }
    }
}

impl Default for GridJson {
    /// The desk-scale grid: 20×20 pixels of 3 m at 40 m altitude.
    fn default() -> Self {
        (&VoxelGrid::centered_slice(20, 20, 3.0, 40.0)).into()
    }
}

/// Serialized form of [`PriorKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorJson {
    MatchedFilter,
    SubspacePursuit { k_prior: usize },
    RawMeasurement,
}

impl From<PriorKind> for PriorJson {
    fn from(p: PriorKind) -> Self {
        match p {
            PriorKind::MatchedFilter => PriorJson::MatchedFilter,
            PriorKind::SubspacePursuit { k_prior } => PriorJson::SubspacePursuit { k_prior },
            PriorKind::RawMeasurement => PriorJson::RawMeasurement,
        }
    }
}

impl From<PriorJson> for PriorKind {
    fn from(p: PriorJson) -> Self {
        match p {
            PriorJson::MatchedFilter => PriorKind::MatchedFilter,
            PriorJson::SubspacePursuit { k_prior } => PriorKind::SubspacePursuit { k_prior },
            PriorJson::RawMeasurement => PriorKind::RawMeasurement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetJson {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub coeff: f64,
}

/// A scene on disk: system configuration, grid and point targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(flatten)]
    pub system: SystemJson,
    pub grid: GridJson,
    pub targets: Vec<TargetJson>,
}

impl SceneFile {
    pub fn new(config: &SystemConfig, grid: &VoxelGrid, targets: &[Target]) -> Self {
        SceneFile {
            system: config.clone().into(),
            grid: grid.into(),
            targets: targets
                .iter()
                .map(|t| TargetJson {
                    x: t.position[0],
                    y: t.position[1],
                    z: t.position[2],
                    coeff: t.scatter_coeff,
                })
                .collect(),
        }
    }

    pub fn targets(&self) -> Vec<Target> {
        self.targets
            .iter()
            .map(|t| Target {
                position: [t.x, t.y, t.z],
                scatter_coeff: t.coeff,
            })
            .collect()
    }

    /// Validates the configuration and rasterizes the targets.
    pub fn to_scene(&self) -> Result<(SystemConfig, VoxelGrid, Scene), CliError> {
        let config = SystemConfig::from(&self.system);
        config.validate().map_err(|e| CliError::invalid("n_bs", e))?;
        let grid = VoxelGrid::from(&self.grid);
        grid.validate().map_err(|e| CliError::invalid("grid", e))?;
        let scene = Scene::new(self.targets(), &grid).map_err(|e| CliError::invalid("targets", e))?;
        Ok((config, grid, scene))
    }
}

/// Which pipeline an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// SP over transmit powers (dBm).
    SweepPower,
    /// SP over UPA side lengths.
    SweepAntennas,
    /// SP over BS spacings (m).
    SweepDistance,
    /// The five-method comparison on off-grid scenes; `sweep` is ignored.
    CompareOffgrid,
    /// Refiner trained at each η in `sweep`.
    SweepEta,
}

impl ExperimentKind {
    pub fn swept_name(&self) -> &'static str {
        match self {
            ExperimentKind::SweepPower => "tx_power_dbm",
            ExperimentKind::SweepAntennas => "upa_side",
            ExperimentKind::SweepDistance => "bs_spacing_m",
            ExperimentKind::CompareOffgrid => "method",
            ExperimentKind::SweepEta => "eta",
        }
    }

    pub fn needs_training(&self) -> bool {
        matches!(self, ExperimentKind::CompareOffgrid | ExperimentKind::SweepEta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesJson {
    pub k_min: usize,
    pub k_max: usize,
    pub on_grid: bool,
    pub noise: bool,
}

impl Default for ScenesJson {
    fn default() -> Self {
        ScenesJson {
            k_min: 1,
            k_max: 5,
            on_grid: false,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverJson {
    pub k_prior: usize,
    pub max_iter: usize,
}

impl Default for SolverJson {
    fn default() -> Self {
        SolverJson {
            k_prior: SpOptions::DEFAULT_K_PRIOR,
            max_iter: SpOptions::DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainJson {
    pub eta: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub phase_augmentation: bool,
    pub n_train_scenes: usize,
    /// Test scenes per evaluation; the harness uses `n_trials` when running
    /// Monte-Carlo points.
    pub n_test_scenes: usize,
}

impl Default for TrainJson {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainJson {
            eta: t.eta,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            final_lr_fraction: t.final_lr_fraction,
            epochs: t.epochs,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
            seed: t.seed,
            phase_augmentation: t.phase_augmentation,
            n_train_scenes: 5000,
            n_test_scenes: 500,
        }
    }
}

impl TrainJson {
    pub fn to_config(&self, threshold: f64) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            final_lr_fraction: self.final_lr_fraction,
            epochs: self.epochs,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            threshold,
            seed: self.seed,
            phase_augmentation: self.phase_augmentation,
        }
    }
}

fn default_threshold() -> f64 {
    lowalt_core::metrics::DEFAULT_THRESHOLD
}

fn default_trials() -> usize {
    100
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// One experiment: a base configuration, a swept parameter and a trial budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub system: SystemJson,
    #[serde(default)]
    pub grid: GridJson,
    #[serde(default)]
    pub scenes: ScenesJson,
    #[serde(default)]
    pub solver: SolverJson,
    #[serde(default)]
    pub train: TrainJson,
    /// Values of the swept parameter (see [`ExperimentKind::swept_name`]).
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentKind) -> Self {
        ExperimentSpec {
            schema: SCHEMA_VERSION,
            experiment,
            system: SystemJson::default(),
            grid: GridJson::default(),
            scenes: ScenesJson::default(),
            solver: SolverJson::default(),
            train: TrainJson::default(),
            sweep: Vec::new(),
            n_trials: default_trials(),
            seed: 0,
            threshold: default_threshold(),
        }
    }

    /// Checks every field; errors name the key.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::invalid(
                "schema",
                format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema),
            ));
        }
        SystemConfig::from(&self.system)
            .validate()
            .map_err(|e| CliError::invalid("system", e))?;
        VoxelGrid::from(&self.grid)
            .validate()
            .map_err(|e| CliError::invalid("grid", e))?;
        if self.scenes.k_min > self.scenes.k_max {
            return Err(CliError::invalid("scenes.k_min", "must not exceed scenes.k_max"));
        }
        if self.solver.k_prior == 0 {
            return Err(CliError::invalid("solver.k_prior", "must be at least 1"));
        }
        if self.n_trials == 0 {
            return Err(CliError::invalid("n_trials", "must be at least 1"));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(CliError::invalid("threshold", "must be finite and non-negative"));
        }
        if self.experiment != ExperimentKind::CompareOffgrid && self.sweep.is_empty() {
            return Err(CliError::invalid("sweep", "swept values must be nonempty"));
        }
        if self.experiment == ExperimentKind::SweepAntennas
            && self.sweep.iter().any(|v| *v < 1.0 || v.fract() != 0.0)
        {
            return Err(CliError::invalid("sweep", "UPA sides must be positive integers"));
        }
        self.train
            .to_config(self.threshold)
            .validate()
            .map_err(|e| CliError::invalid("train", e))?;
        if self.experiment.needs_training() && self.train.n_train_scenes == 0 {
            return Err(CliError::invalid("train.n_train_scenes", "must be at least 1"));
        }
        Ok(())
    }

    /// Switches to the published scale: 1000 trials per point, the 40×40
    /// grid, 100 000 training scenes over 200 epochs and 10 000 test scenes.
    pub fn full_scale(&mut self) {
        self.n_trials = 1000;
        self.grid = (&VoxelGrid::default()).into();
        self.train.n_train_scenes = 100_000;
        self.train.epochs = 200;
        self.train.n_test_scenes = 10_000;
    }

    pub fn system_config(&self) -> SystemConfig {
        SystemConfig::from(&self.system)
    }

    pub fn voxel_grid(&self) -> VoxelGrid {
        VoxelGrid::from(&self.grid)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_config(self.threshold)
    }

    /// System configuration at swept point `value`.
    pub fn system_at(&self, value: f64) -> SystemConfig {
        let mut c = self.system_config();
        match self.experiment {
            ExperimentKind::SweepPower => c.tx_power_dbm = value,
            ExperimentKind::SweepAntennas => c.upa_side = value as usize,
            ExperimentKind::SweepDistance => c.bs_spacing_m = value,
            ExperimentKind::CompareOffgrid | ExperimentKind::SweepEta => {}
        }
        c
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses JSON, reporting the path of the first offending key.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Schema {
            key: if path.is_empty() { ".".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_json(&text)
}

/// Loads and validates an experiment spec.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let spec: ExperimentSpec = read_json(path)?;
    spec.validate()?;
    Ok(spec)
}

//! Reconstruction pipelines shared by the harness and the CLI.

use std::fmt;

use lowalt_core::channel::{synthesize_csi, Noise};
use lowalt_core::imaging::{
    build_sensing_matrix, normalized_matched_filter, subspace_pursuit, SensingMatrix, SpOptions, SpResult, Storage,
};
use lowalt_core::learning::{
    compute_prior, infer, init_model, make_dataset, train, Dataset, DatasetSpec, EpochRecord, ModelInput, PriorKind,
    RefinerConfig, RefinerModel, Setup, TrainOutcome,
};
use lowalt_core::metrics::{self, MetricsRecord};
use lowalt_core::rng::{stream_id, substream, SimRng};
use lowalt_core::scene::{build_bs_layout, sample_scene, BsLayout, Scene, SystemConfig, VoxelGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::schema::{ExperimentSpec, ScenesJson, TrainJson};

/// Dense matrices up to this many bytes are materialized; larger ones are
/// applied matrix-free.
pub const DENSE_LIMIT_BYTES: usize = 1 << 30;

/// Stream tag separating training scenes from test trials of the same seed.
const TRAIN_STREAM: u64 = u64::from_be_bytes(*b"\0\0\0train");

/// The five rows of the off-grid comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Subspace pursuit with the configured `K°`.
    Sp,
    /// Matched filter `Aᴴy`, column-normalized.
    MatchedFilter,
    /// The network on raw CSI.
    DnnRaw,
    /// The network refining the SP image.
    ModelDnnSp,
    /// The network refining `Aᴴy`.
    ModelDnnMf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Sp,
        Method::MatchedFilter,
        Method::DnnRaw,
        Method::ModelDnnSp,
        Method::ModelDnnMf,
    ];

    /// Short name used in file names and CSV columns.
    pub fn key(&self) -> &'static str {
        match self {
            Method::Sp => "sp",
            Method::MatchedFilter => "ahy",
            Method::DnnRaw => "dnn-y",
            Method::ModelDnnSp => "model-dnn-sp",
            Method::ModelDnnMf => "model-dnn-ahy",
        }
    }

    /// Input the network is trained on, for learned methods.
    pub fn prior(&self, k_prior: usize) -> Option<PriorKind> {
        match self {
            Method::Sp | Method::MatchedFilter => None,
            Method::DnnRaw => Some(PriorKind::RawMeasurement),
            Method::ModelDnnSp => Some(PriorKind::SubspacePursuit { k_prior }),
            Method::ModelDnnMf => Some(PriorKind::MatchedFilter),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sp => "SP",
            Method::MatchedFilter => "AHy",
            Method::DnnRaw => "DNN<y",
            Method::ModelDnnSp => "Model+DNN<SP",
            Method::ModelDnnMf => "Model+DNN<AHy",
        })
    }
}

/// Configuration, grid, BS layout and sensing matrix of one swept point.
pub struct Geometry {
    pub config: SystemConfig,
    pub grid: VoxelGrid,
    pub layout: BsLayout,
    pub matrix: SensingMatrix,
}

impl Geometry {
    pub fn new(config: SystemConfig, grid: VoxelGrid) -> Result<Self, CliError> {
        let layout = build_bs_layout(&config)?;
        let bytes = config.n_measurements() * grid.n_voxels() * 16;
        let storage = if bytes <= DENSE_LIMIT_BYTES {
            Storage::Dense
        } else {
            Storage::MatrixFree
        };
        let matrix = build_sensing_matrix(&grid, &config, &layout, storage)?;
        Ok(Geometry {
            config,
            grid,
            layout,
            matrix,
        })
    }

    pub fn with_matrix(config: SystemConfig, grid: VoxelGrid, matrix: SensingMatrix) -> Result<Self, CliError> {
        let layout = build_bs_layout(&config)?;
        if matrix.nrows() != config.n_measurements() || matrix.ncols() != grid.n_voxels() {
            return Err(CliError::invalid("matrix", "cached matrix does not match the configuration"));
        }
        Ok(Geometry {
            config,
            grid,
            layout,
            matrix,
        })
    }

    pub fn setup(&self) -> Setup<'_> {
        Setup {
            config: &self.config,
            grid: &self.grid,
            layout: &self.layout,
            matrix: &self.matrix,
        }
    }
}

/// Seed of the training scenes for an experiment seed.
pub fn training_seed(seed: u64) -> u64 {
    stream_id(&[TRAIN_STREAM, seed])
}

/// Generator of test trial `trial`. Every swept point sees the same scenes,
/// so differences between points are not scene draws.
pub fn trial_rng(seed: u64, trial: usize) -> SimRng {
    substream(seed, stream_id(&[trial as u64]))
}

pub fn dataset_spec(scenes: &ScenesJson, n_scenes: usize, prior: PriorKind, seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_scenes,
        k_range: scenes.k_min..=scenes.k_max,
        on_grid: scenes.on_grid,
        noise: if scenes.noise { Noise::On } else { Noise::Off },
        prior,
        seed,
    }
}

/// Default architecture for `prior` over `grid` (layers stacked vertically).
pub fn refiner_config(grid: &VoxelGrid, prior: PriorKind, rows: usize) -> RefinerConfig {
    let mut c = RefinerConfig::new(grid.ny * grid.nz, grid.nx);
    if prior == PriorKind::RawMeasurement {
        c.input = ModelInput::Vector {
            len: prior.input_len(grid.n_voxels(), rows),
        };
    }
    c
}

/// A trained model together with what produced it.
pub struct Trained {
    pub outcome: TrainOutcome,
    pub dataset: Dataset,
}

/// Generates the training set for `prior` and trains a fresh model on it.
pub fn train_refiner(
    geom: &Geometry,
    spec: &ExperimentSpec,
    train_json: &TrainJson,
    prior: PriorKind,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained, CliError> {
    let dspec = dataset_spec(&spec.scenes, train_json.n_train_scenes, prior, training_seed(spec.seed));
    let dataset = make_dataset(&geom.setup(), &dspec, None)?;
    log::info!(
        "generated {} training scenes for {:?} (scale {:e})",
        dataset.samples.len(),
        prior,
        dataset.scale
    );
    let mut model = init_model(refiner_config(&geom.grid, prior, geom.matrix.nrows()), train_json.seed)?;
    model.set_input_scale(dataset.scale);
    let outcome = train(&dataset.samples, model, &train_json.to_config(spec.threshold), progress)?;
    Ok(Trained { outcome, dataset })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverRecord {
    pub support: Vec<usize>,
    /// `[re, im]` per support entry.
    pub coefficients: Vec<[f64; 2]>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl From<&SpResult> for SolverRecord {
    fn from(r: &SpResult) -> Self {
        SolverRecord {
            support: r.support.clone(),
            coefficients: r.coefficients.iter().map(|c| [c.re, c.im]).collect(),
            residual_norm: r.residual_norm,
            iterations: r.iterations,
        }
    }
}

/// Result of one method on one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialMetrics {
    pub mse: f64,
    pub ssim: f64,
    pub dr: f64,
    pub fdr: f64,
    /// `Σ|σ̂|` of the predicted image.
    pub l1_mass: f64,
    pub n_truth_targets: usize,
    pub n_pred_targets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverRecord>,
}

impl TrialMetrics {
    fn new(r: MetricsRecord, pred: &[f64], solver: Option<SolverRecord>) -> Self {
        TrialMetrics {
            mse: r.mse,
            ssim: r.ssim,
            dr: r.dr,
            fdr: r.fdr,
            l1_mass: pred.iter().map(|v| v.abs()).sum(),
            n_truth_targets: r.n_truth_targets,
            n_pred_targets: r.n_pred_targets,
            solver,
        }
    }
}

/// Draws a test scene and its noisy CSI from `rng`.
pub fn draw_scene(geom: &Geometry, scenes: &ScenesJson, rng: &mut SimRng) -> Result<(Scene, Vec<num_complex::Complex64>, f64), CliError> {
    let scene = sample_scene(&geom.grid, scenes.k_min..=scenes.k_max, scenes.on_grid, rng)?;
    let noise = if scenes.noise { Noise::On } else { Noise::Off };
    let m = synthesize_csi(&scene, &geom.config, &geom.layout, noise, rng)?;
    Ok((scene, m.y, m.noise_std))
}

/// Reconstructs one measured scene with `method` and scores it.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    geom: &Geometry,
    method: Method,
    k_prior: usize,
    max_iter: usize,
    threshold: f64,
    model: Option<&RefinerModel<f32>>,
    scene: &Scene,
    y: &[num_complex::Complex64],
    noise_std: f64,
) -> Result<TrialMetrics, CliError> {
    let sp = |k| -> Result<SpResult, CliError> {
        let mut opts = SpOptions::new(k, geom.matrix.nrows(), noise_std);
        opts.max_iter = max_iter;
        Ok(subspace_pursuit(y, &geom.matrix, &opts)?)
    };
    let (pred, solver) = match method {
        Method::Sp => {
            let r = sp(k_prior)?;
            (r.estimate.magnitude(), Some(SolverRecord::from(&r)))
        }
        Method::MatchedFilter => {
            let v = normalized_matched_filter(&geom.matrix, y)?;
            (v.iter().map(|c| c.norm()).collect(), None)
        }
        Method::DnnRaw | Method::ModelDnnSp | Method::ModelDnnMf => {
            let model = model.ok_or_else(|| CliError::invalid("model", format!("{method} needs a trained model")))?;
            let prior = match method {
                Method::ModelDnnSp => sp(k_prior)?.estimate.sigma_hat,
                _ => compute_prior(method.prior(k_prior).unwrap(), &geom.matrix, y, noise_std)?,
            };
            (infer(model, &prior)?.magnitude(), None)
        }
    };
    let r = metrics::evaluate(&pred, &scene.truth_image, threshold);
    Ok(TrialMetrics::new(r, &pred, solver))
}

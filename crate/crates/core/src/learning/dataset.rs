//! Training pairs: a physics prior computed from simulated CSI, and the
//! voxel ground truth.

use alloc::vec::Vec;
use core::ops::RangeInclusive;

use num_complex::Complex64;

use super::LearningError;
use crate::channel::{synthesize_csi, Noise};
use crate::imaging::{matched_filter, subspace_pursuit, SensingMatrix, SpOptions};
use crate::rng::substream;
use crate::scene::{sample_scene, BsLayout, SystemConfig, VoxelGrid};

/// What the network is given as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// `Aᴴy`.
    MatchedFilter,
    /// The subspace-pursuit image with the given prior sparsity.
    SubspacePursuit { k_prior: usize },
    /// The raw CSI vector `y` (consumed through a dense lift).
    RawMeasurement,
}

impl PriorKind {
    /// Real length of one input for a grid of `n_voxels` and `rows` measurements.
    pub fn input_len(&self, n_voxels: usize, rows: usize) -> usize {
        match self {
            PriorKind::RawMeasurement => 2 * rows,
            _ => 2 * n_voxels,
        }
    }
}

/// Geometry shared by every scene of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Setup<'a> {
    pub config: &'a SystemConfig,
    pub grid: &'a VoxelGrid,
    pub layout: &'a BsLayout,
    pub matrix: &'a SensingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub k_range: RangeInclusive<usize>,
    pub on_grid: bool,
    pub noise: Noise,
    pub prior: PriorKind,
    pub seed: u64,
}

impl DatasetSpec {
    /// Off-grid, noisy scenes with 1 to 5 targets and a matched-filter prior.
    pub fn new(n_scenes: usize, seed: u64) -> Self {
        DatasetSpec {
            n_scenes,
            k_range: 1..=5,
            on_grid: false,
            noise: Noise::On,
            prior: PriorKind::MatchedFilter,
            seed,
        }
    }
}

/// One input/label pair. `input` holds the real parts followed by the
/// imaginary parts; `label` is the ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Vec<f32>,
    pub label: Vec<f32>,
    pub k: usize,
}

/// Split complex vector as `[re..., im...]`.
pub fn split_complex(z: &[Complex64]) -> Vec<f32> {
    z.iter().map(|c| c.re as f32).chain(z.iter().map(|c| c.im as f32)).collect()
}

/// Computes the unnormalized input for one prior kind.
pub fn compute_prior(
    kind: PriorKind,
    matrix: &SensingMatrix,
    y: &[Complex64],
    noise_std: f64,
) -> Result<Vec<Complex64>, LearningError> {
    Ok(match kind {
        PriorKind::MatchedFilter => matched_filter(matrix, y)?,
        PriorKind::SubspacePursuit { k_prior } => {
            let opts = SpOptions::new(k_prior, matrix.nrows(), noise_std);
            subspace_pursuit(y, matrix, &opts)?.estimate.sigma_hat
        }
        PriorKind::RawMeasurement => y.to_vec(),
    })
}

/// Generates scene `index` of the dataset, unnormalized. Every scene draws
/// from its own substream, so any sample can be regenerated alone.
pub fn generate_sample(setup: &Setup<'_>, spec: &DatasetSpec, index: usize) -> Result<TrainSample, LearningError> {
    let mut rng = substream(spec.seed, index as u64);
    let scene = sample_scene(setup.grid, spec.k_range.clone(), spec.on_grid, &mut rng)?;
    let m = synthesize_csi(&scene, setup.config, setup.layout, spec.noise, &mut rng)?;
    let prior = compute_prior(spec.prior, setup.matrix, &m.y, m.noise_std)?;
    Ok(TrainSample {
        input: split_complex(&prior),
        label: scene.truth_image.iter().map(|&s| s as f32).collect(),
        k: scene.support_size(),
    })
}

/// 99th percentile of the complex magnitudes across all inputs; 1 when
/// every input is zero.
pub fn normalization_scale(samples: &[TrainSample]) -> f64 {
    let mut mags: Vec<f32> = Vec::new();
    for s in samples {
        let half = s.input.len() / 2;
        let (re, im) = s.input.split_at(half);
        mags.extend(re.iter().zip(im).map(|(a, b)| libm::hypotf(*a, *b)));
    }
    if mags.is_empty() {
        return 1.0;
    }
    let rank = (libm::ceil(0.99 * mags.len() as f64) as usize).clamp(1, mags.len()) - 1;
    let (_, q, _) = mags.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    let q = *q as f64;
    if q > 0.0 && q.is_finite() {
        q
    } else {
        1.0
    }
}

/// Divides every input by `scale`.
pub fn normalize(samples: &mut [TrainSample], scale: f64) {
    for s in samples {
        for v in &mut s.input {
            *v = (*v as f64 / scale) as f32;
        }
    }
}

/// A normalized dataset and the scale that was divided out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub scale: f64,
    pub prior: PriorKind,
}

/// Generates `spec.n_scenes` samples and normalizes them. With `scale` given
/// (e.g. a test set reusing the training constant) it is used as is,
/// otherwise it is estimated from the generated inputs.
pub fn make_dataset(setup: &Setup<'_>, spec: &DatasetSpec, scale: Option<f64>) -> Result<Dataset, LearningError> {
    let mut samples = (0..spec.n_scenes)
        .map(|i| generate_sample(setup, spec, i))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = scale.unwrap_or_else(|| normalization_scale(&samples));
    normalize(&mut samples, scale);
    Ok(Dataset {
        samples,
        scale,
        prior: spec.prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{build_sensing_matrix, Storage};
    use crate::scene::build_bs_layout;
    use std::vec;

    fn fixture() -> (SystemConfig, VoxelGrid, BsLayout, SensingMatrix) {
        let config = SystemConfig {
            upa_side: 2,
            n_subcarriers: 2,
            ..SystemConfig::default()
        };
        let grid = VoxelGrid::centered_slice(6, 5, 3.0, 40.0);
        let layout = build_bs_layout(&config).unwrap();
        let a = build_sensing_matrix(&grid, &config, &layout, Storage::Dense).unwrap();
        (config, grid, layout, a)
    }

    #[test]
    fn empty_dataset() {
        let (config, grid, layout, matrix) = fixture();
        let setup = Setup {
            config: &config,
            grid: &grid,
            layout: &layout,
            matrix: &matrix,
        };
        let d = make_dataset(&setup, &DatasetSpec::new(0, 1), None).unwrap();
        assert!(d.samples.is_empty());
        assert_eq!(d.scale, 1.0);
    }

    #[test]
    fn samples_regenerate_from_their_own_seed() {
        let (config, grid, layout, matrix) = fixture();
        let setup = Setup {
            config: &config,
            grid: &grid,
            layout: &layout,
            matrix: &matrix,
        };
        let spec = DatasetSpec::new(6, 42);
        let d = make_dataset(&setup, &spec, None).unwrap();
        for (i, s) in d.samples.iter().enumerate() {
            assert_eq!(s.input.len(), 2 * grid.n_voxels());
            assert_eq!(s.k, s.label.iter().filter(|v| **v != 0.0).count());
            assert!(s.label.iter().all(|v| *v >= 0.0));
            // rebuild the measurement by hand and compare against Aᴴy
            let mut rng = substream(42, i as u64);
            let scene = sample_scene(&grid, 1..=5, false, &mut rng).unwrap();
            let m = synthesize_csi(&scene, &config, &layout, Noise::On, &mut rng).unwrap();
            let mf = matched_filter(&matrix, &m.y).unwrap();
            let expected: Vec<f32> = split_complex(&mf).iter().map(|v| (*v as f64 / d.scale) as f32).collect();
            assert_eq!(s.input, expected);
        }
    }

    #[test]
    fn percentile_scale() {
        let samples: Vec<TrainSample> = (0..100)
            .map(|i| TrainSample {
                input: vec![i as f32 + 1.0, 0.0],
                label: vec![0.0],
                k: 0,
            })
            .collect();
        assert_eq!(normalization_scale(&samples), 99.0);
    }

    #[test]
    fn prior_lengths() {
        let (config, grid, layout, matrix) = fixture();
        let setup = Setup {
            config: &config,
            grid: &grid,
            layout: &layout,
            matrix: &matrix,
        };
        for prior in [
            PriorKind::MatchedFilter,
            PriorKind::SubspacePursuit { k_prior: 3 },
            PriorKind::RawMeasurement,
        ] {
            let spec = DatasetSpec {
                prior,
                ..DatasetSpec::new(2, 3)
            };
            let s = generate_sample(&setup, &spec, 0).unwrap();
            assert_eq!(s.input.len(), prior.input_len(grid.n_voxels(), matrix.nrows()));
        }
    }
}

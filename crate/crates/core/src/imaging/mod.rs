//! On-grid sensing matrix and classical sparse reconstruction.

mod operator;
mod pursuit;

pub use operator::{build_sensing_matrix, SensingMatrix, Storage};
pub use pursuit::{
    ls_on_support, residual, select_top_k, subspace_pursuit, ImageEstimate, SpOptions, SpResult,
    StopReason, MAX_LS_CONDITION,
};

use alloc::vec::Vec;
use num_complex::Complex64;
use thiserror::Error;

use crate::scene::SceneError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImagingError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("voxel {voxel} center coincides with an antenna")]
    CoincidentAntenna { voxel: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sparsity {k} is invalid for a vector of length {len}")]
    InvalidSparsity { k: usize, len: usize },
    #[error("residual threshold must be finite and positive, got {0}")]
    InvalidThreshold(f64),
    #[error("support index {index} out of range for {cols} columns")]
    IndexOutOfRange { index: usize, cols: usize },
    #[error("columns on a support of size {support_len} are rank deficient (condition number {condition:e})")]
    RankDeficient { support_len: usize, condition: f64 },
}

/// Matched filter `σ_pri = Aᴴy`, with no thresholding.
pub fn matched_filter(a: &SensingMatrix, y: &[Complex64]) -> Result<Vec<Complex64>, ImagingError> {
    if y.len() != a.nrows() {
        return Err(ImagingError::ShapeMismatch {
            what: "measurement",
            expected: a.nrows(),
            got: y.len(),
        });
    }
    Ok(a.adjoint(y))
}

/// Matched filter divided by each column's energy, `aᵥᴴy / ‖aᵥ‖²`.
///
/// For a lone on-grid target this returns its coefficient at the target
/// voxel, which puts `Aᴴy` on the same scale as the ground truth when it is
/// scored as an image.
pub fn normalized_matched_filter(a: &SensingMatrix, y: &[Complex64]) -> Result<Vec<Complex64>, ImagingError> {
    let mut out = matched_filter(a, y)?;
    let mut col = alloc::vec![Complex64::new(0.0, 0.0); a.nrows()];
    for (v, z) in out.iter_mut().enumerate() {
        a.column_into(v, &mut col);
        let energy: f64 = col.iter().map(|c| c.norm_sqr()).sum();
        if energy > 0.0 {
            *z /= energy;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::noiseless_csi;
    use crate::scene::{build_bs_layout, SystemConfig, Target, VoxelGrid};

    #[test]
    fn normalized_filter_recovers_lone_on_grid_coefficient() {
        let config = SystemConfig {
            upa_side: 2,
            n_subcarriers: 2,
            ..SystemConfig::default()
        };
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid::centered_slice(5, 5, 3.0, 40.0);
        let a = build_sensing_matrix(&grid, &config, &layout, Storage::Dense).unwrap();
        let target = Target {
            position: grid.center(7),
            scatter_coeff: 0.12,
        };
        let y = noiseless_csi(&[target], &config, &layout).unwrap();
        let img = normalized_matched_filter(&a, &y).unwrap();
        assert!((img[7] - Complex64::new(0.12, 0.0)).norm() < 1e-12);
    }
}

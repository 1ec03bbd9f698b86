use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::ImagingError;
use crate::channel::{phasor, subcarrier_wavelengths, MeasurementLayout};
use crate::distance;
use crate::scene::{BsLayout, SystemConfig, VoxelGrid};

/// How the sensing matrix keeps its entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// All `rows × n_v` entries stored column-major.
    Dense,
    /// Only the per-antenna voxel gains are stored; entries are formed on demand.
    MatrixFree,
}

/// On-grid sensing matrix `A`.
///
/// Row `(p, nt, nr, nf)` (in [`MeasurementLayout`] order) and column `v` hold
/// `h(tx, v, nf) · h(rx, v, nf)` with `h(a, v, f) = exp(-j2π d/λ_f) / (√(4π) d)`
/// and `d` the distance from antenna `a` to the center of voxel `v`. Both
/// storage modes evaluate entries with the same arithmetic, so they agree
/// bit for bit.
#[derive(Debug, Clone)]
pub struct SensingMatrix {
    layout: MeasurementLayout,
    n_voxels: usize,
    n_antennas: usize,
    /// `gains[(v·n_antennas + a)·n_f + f]`
    gains: Vec<Complex64>,
    dense: Option<Vec<Complex64>>,
}

/// Builds `A` for `grid` under `config` and `layout`.
pub fn build_sensing_matrix(
    grid: &VoxelGrid,
    config: &SystemConfig,
    layout: &BsLayout,
    storage: Storage,
) -> Result<SensingMatrix, ImagingError> {
    config.validate()?;
    grid.validate()?;
    let wavelengths = subcarrier_wavelengths(config);
    let nf = wavelengths.len();
    let antennas: Vec<_> = layout.arrays.iter().flat_map(|a| a.positions.iter()).collect();
    let n_voxels = grid.n_voxels();
    let norm = libm::sqrt(4.0 * PI);

    let mut gains = Vec::with_capacity(n_voxels * antennas.len() * nf);
    for v in 0..n_voxels {
        let center = grid.center(v);
        for antenna in &antennas {
            let d = distance(antenna, &center);
            if d == 0.0 {
                return Err(ImagingError::CoincidentAntenna { voxel: v });
            }
            for &lambda in &wavelengths {
                gains.push(phasor(d / lambda) / (norm * d));
            }
        }
    }

    let mut a = SensingMatrix {
        layout: MeasurementLayout::from_config(config),
        n_voxels,
        n_antennas: antennas.len(),
        gains,
        dense: None,
    };
    if storage == Storage::Dense {
        a = a.materialize();
    }
    Ok(a)
}

impl SensingMatrix {
    pub fn nrows(&self) -> usize {
        self.layout.len()
    }

    pub fn ncols(&self) -> usize {
        self.n_voxels
    }

    pub fn layout(&self) -> &MeasurementLayout {
        &self.layout
    }

    pub fn storage(&self) -> Storage {
        if self.dense.is_some() {
            Storage::Dense
        } else {
            Storage::MatrixFree
        }
    }

    /// Column-major entries, when materialized.
    pub fn dense_entries(&self) -> Option<&[Complex64]> {
        self.dense.as_deref()
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    /// Per-antenna voxel gains `h(a, v, f)`, indexed `(v·n_antennas + a)·n_f + f`.
    /// Every entry of `A` is a product of two of these.
    pub fn gains(&self) -> &[Complex64] {
        &self.gains
    }

    /// Rebuilds a matrix from a stored gain table.
    pub fn from_gains(
        layout: MeasurementLayout,
        n_voxels: usize,
        gains: Vec<Complex64>,
        storage: Storage,
    ) -> Result<Self, ImagingError> {
        let n_antennas = layout.n_bs() * layout.antennas_per_bs;
        let expected = n_voxels * n_antennas * layout.n_subcarriers;
        if gains.len() != expected {
            return Err(ImagingError::ShapeMismatch {
                what: "gain table",
                expected,
                got: gains.len(),
            });
        }
        let a = SensingMatrix {
            layout,
            n_voxels,
            n_antennas,
            gains,
            dense: None,
        };
        Ok(match storage {
            Storage::Dense => a.materialize(),
            Storage::MatrixFree => a,
        })
    }

    /// Stores every entry explicitly.
    pub fn materialize(mut self) -> Self {
        if self.dense.is_none() {
            let rows = self.nrows();
            let mut data = alloc::vec![Complex64::new(0.0, 0.0); rows * self.n_voxels];
            for (v, col) in data.chunks_exact_mut(rows).enumerate() {
                self.generate_column(v, col);
            }
            self.dense = Some(data);
        }
        self
    }

    /// Drops stored entries, keeping only the gain table.
    pub fn into_matrix_free(mut self) -> Self {
        self.dense = None;
        self
    }

    fn generate_column(&self, v: usize, out: &mut [Complex64]) {
        let na = self.layout.antennas_per_bs;
        let nf = self.layout.n_subcarriers;
        let g = &self.gains[v * self.n_antennas * nf..(v + 1) * self.n_antennas * nf];
        let mut row = 0;
        for &(b1, b2) in &self.layout.pairs {
            for nt in 0..na {
                let tx = &g[(b1 * na + nt) * nf..(b1 * na + nt + 1) * nf];
                for nr in 0..na {
                    let rx = &g[(b2 * na + nr) * nf..(b2 * na + nr + 1) * nf];
                    for f in 0..nf {
                        out[row] = tx[f] * rx[f];
                        row += 1;
                    }
                }
            }
        }
    }

    /// Writes column `v` into `out` (length `nrows`).
    pub fn column_into(&self, v: usize, out: &mut [Complex64]) {
        let rows = self.nrows();
        match &self.dense {
            Some(data) => out.copy_from_slice(&data[v * rows..(v + 1) * rows]),
            None => self.generate_column(v, out),
        }
    }

    pub fn column(&self, v: usize) -> Vec<Complex64> {
        let mut out = alloc::vec![Complex64::new(0.0, 0.0); self.nrows()];
        self.column_into(v, &mut out);
        out
    }

    /// `aᵥᴴ y` for a single column.
    fn column_adjoint(&self, v: usize, y: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        match &self.dense {
            Some(data) => {
                let rows = self.nrows();
                for (a, b) in data[v * rows..(v + 1) * rows].iter().zip(y) {
                    acc += a.conj() * b;
                }
            }
            None => {
                let na = self.layout.antennas_per_bs;
                let nf = self.layout.n_subcarriers;
                let g = &self.gains[v * self.n_antennas * nf..(v + 1) * self.n_antennas * nf];
                let mut row = 0;
                for &(b1, b2) in &self.layout.pairs {
                    for nt in 0..na {
                        let tx = &g[(b1 * na + nt) * nf..(b1 * na + nt + 1) * nf];
                        for nr in 0..na {
                            let rx = &g[(b2 * na + nr) * nf..(b2 * na + nr + 1) * nf];
                            for f in 0..nf {
                                let a = tx[f] * rx[f];
                                acc += a.conj() * y[row];
                                row += 1;
                            }
                        }
                    }
                }
            }
        }
        acc
    }

    /// `Aᴴ y`. The caller guarantees `y.len() == nrows()`.
    pub fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(y.len(), self.nrows());
        (0..self.n_voxels).map(|v| self.column_adjoint(v, y)).collect()
    }

    /// `A x`, skipping zero entries of `x`.
    pub fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>, ImagingError> {
        if x.len() != self.n_voxels {
            return Err(ImagingError::ShapeMismatch {
                what: "image",
                expected: self.n_voxels,
                got: x.len(),
            });
        }
        let rows = self.nrows();
        let mut y = alloc::vec![Complex64::new(0.0, 0.0); rows];
        let mut col = alloc::vec![Complex64::new(0.0, 0.0); rows];
        for (v, &xv) in x.iter().enumerate() {
            if xv == Complex64::new(0.0, 0.0) {
                continue;
            }
            self.column_into(v, &mut col);
            for (yi, a) in y.iter_mut().zip(&col) {
                *yi += a * xv;
            }
        }
        Ok(y)
    }

    /// Sub-matrix `A_S` with the columns listed in `support`.
    pub fn columns(&self, support: &[usize]) -> Result<DMatrix<Complex64>, ImagingError> {
        let rows = self.nrows();
        let mut m = DMatrix::zeros(rows, support.len());
        for (j, &v) in support.iter().enumerate() {
            if v >= self.n_voxels {
                return Err(ImagingError::IndexOutOfRange {
                    index: v,
                    cols: self.n_voxels,
                });
            }
            self.column_into(v, m.column_mut(j).as_mut_slice());
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{noiseless_csi, point_target_csi};
    use crate::rng::seeded;
    use crate::scene::{build_bs_layout, sample_scene, Target};
    use std::vec;

    #[test]
    fn single_entry_magnitude() {
        let config = SystemConfig {
            n_bs: 2,
            upa_side: 1,
            n_subcarriers: 1,
            ..SystemConfig::default()
        };
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid {
            origin: [1.0, -2.0, 39.5],
            nx: 1,
            ny: 1,
            nz: 1,
            dx: 3.0,
            dy: 3.0,
            dz: 1.0,
        };
        let a = build_sensing_matrix(&grid, &config, &layout, Storage::Dense).unwrap();
        // pairs (0,0), (0,1), (1,1); each one row
        assert_eq!((a.nrows(), a.ncols()), (3, 1));
        let c = grid.center(0);
        let d0 = distance(&layout.arrays[0].positions[0], &c);
        let d1 = distance(&layout.arrays[1].positions[0], &c);
        let col = a.column(0);
        let expected = [
            1.0 / (4.0 * PI * d0 * d0),
            1.0 / (4.0 * PI * d0 * d1),
            1.0 / (4.0 * PI * d1 * d1),
        ];
        for (z, e) in col.iter().zip(expected) {
            assert!((z.norm() / e - 1.0).abs() < 1e-12);
        }
        let target = Target {
            position: c,
            scatter_coeff: 1.0,
        };
        let direct = point_target_csi(
            &layout.arrays[0].positions[0],
            &layout.arrays[1].positions[0],
            &target,
            config.wavelength(),
        )
        .unwrap();
        assert!((col[1] - direct).norm() <= 1e-11 * direct.norm(), "{}", (col[1] - direct).norm() / direct.norm());
    }

    #[test]
    fn full_scale_shape() {
        let config = SystemConfig::default();
        let layout = build_bs_layout(&config).unwrap();
        let a = build_sensing_matrix(&VoxelGrid::default(), &config, &layout, Storage::MatrixFree).unwrap();
        assert_eq!((a.nrows(), a.ncols()), (25_000, 1600));
    }

    #[test]
    fn on_grid_forward_matches_synthesis() {
        let config = SystemConfig {
            upa_side: 2,
            n_subcarriers: 3,
            ..SystemConfig::default()
        };
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid::centered_slice(8, 8, 3.0, 40.0);
        let a = build_sensing_matrix(&grid, &config, &layout, Storage::MatrixFree).unwrap();
        let mut rng = seeded(8);
        for _ in 0..5 {
            let scene = sample_scene(&grid, 1..=5, true, &mut rng).unwrap();
            let sigma: Vec<Complex64> = scene.truth_image.iter().map(|&s| Complex64::new(s, 0.0)).collect();
            let ay = a.apply(&sigma).unwrap();
            let y = noiseless_csi(&scene.targets, &config, &layout).unwrap();
            let err: f64 = ay.iter().zip(&y).map(|(p, q)| (p - q).norm_sqr()).sum();
            let den: f64 = ay.iter().map(|p| p.norm_sqr()).sum();
            assert!(libm::sqrt(err / den) <= 1e-10);
        }
    }

    #[test]
    fn storage_modes_agree() {
        let config = SystemConfig {
            upa_side: 2,
            n_subcarriers: 2,
            ..SystemConfig::default()
        };
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid::centered_slice(5, 4, 3.0, 40.0);
        let free = build_sensing_matrix(&grid, &config, &layout, Storage::MatrixFree).unwrap();
        let dense = free.clone().materialize();
        assert_eq!(dense.storage(), Storage::Dense);
        let y: Vec<Complex64> = (0..free.nrows())
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        assert_eq!(free.adjoint(&y), dense.adjoint(&y));
        let s = vec![0, 7, 19];
        assert_eq!(free.columns(&s).unwrap(), dense.columns(&s).unwrap());
        let rebuilt = SensingMatrix::from_gains(free.layout().clone(), free.ncols(), free.gains().to_vec(), Storage::Dense)
            .unwrap();
        assert_eq!(rebuilt.dense_entries(), dense.dense_entries());
        assert!(SensingMatrix::from_gains(free.layout().clone(), 3, free.gains().to_vec(), Storage::Dense).is_err());
    }
}

//! Network geometry, the voxelized region of interest, and random UAV scenes.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::{Point3, SPEED_OF_LIGHT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("a convex BS layout needs at least 2 base stations, got {0}")]
    TooFewBaseStations(usize),
    #[error("invalid system config: `{field}` {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: &'static str,
    },
    #[error("invalid voxel grid: `{field}` {reason}")]
    InvalidGrid {
        field: &'static str,
        reason: &'static str,
    },
    #[error("empty target-count range")]
    EmptyRange,
    #[error("cannot place {requested} on-grid targets in {voxels} voxels")]
    TooManyTargets { requested: usize, voxels: usize },
    #[error("target {index} at {position:?} lies outside the ROI")]
    OutsideRoi { index: usize, position: Point3 },
    #[error("target {index} has negative or non-finite scattering coefficient {value}")]
    BadCoefficient { index: usize, value: f64 },
}

/// Network and radio parameters.
///
/// Defaults follow the simulated deployment: four BSs on the corners of a
/// 140 m square at 20 m height, 5×5 UPAs, 2.6 GHz carrier, 40 dBm transmit
/// power and -110 dBm per-antenna noise. `n_subcarriers`, `bandwidth_hz` and
/// `aperture_gain` have no published values; 4 subcarriers over 20 MHz with
/// unit gain are engineering defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_bs: usize,
    pub bs_height_m: f64,
    /// Edge length of the regular BS polygon.
    pub bs_spacing_m: f64,
    /// Antennas per UPA side; each BS carries `upa_side²` antennas.
    pub upa_side: usize,
    pub center_freq_hz: f64,
    pub n_subcarriers: usize,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    /// Additive noise power per receive antenna.
    pub noise_power_dbm: f64,
    pub aperture_gain: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n_bs: 4,
            bs_height_m: 20.0,
            bs_spacing_m: 140.0,
            upa_side: 5,
            center_freq_hz: 2.6e9,
            n_subcarriers: 4,
            bandwidth_hz: 20e6,
            tx_power_dbm: 40.0,
            noise_power_dbm: -110.0,
            aperture_gain: 1.0,
        }
    }
}

fn positive(value: f64, field: &'static str) -> Result<(), SceneError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(SceneError::InvalidConfig {
            field,
            reason: "must be finite and strictly positive",
        })
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_bs < 2 {
            return Err(SceneError::TooFewBaseStations(self.n_bs));
        }
        if self.upa_side == 0 {
            return Err(SceneError::InvalidConfig {
                field: "upa_side",
                reason: "must be at least 1",
            });
        }
        if self.n_subcarriers == 0 {
            return Err(SceneError::InvalidConfig {
                field: "n_subcarriers",
                reason: "must be at least 1",
            });
        }
        positive(self.bs_height_m, "bs_height_m")?;
        positive(self.bs_spacing_m, "bs_spacing_m")?;
        positive(self.center_freq_hz, "center_freq_hz")?;
        positive(self.bandwidth_hz, "bandwidth_hz")?;
        positive(self.aperture_gain, "aperture_gain")?;
        if self.bandwidth_hz >= 2.0 * self.center_freq_hz {
            return Err(SceneError::InvalidConfig {
                field: "bandwidth_hz",
                reason: "must be below twice the center frequency",
            });
        }
        if !self.tx_power_dbm.is_finite() {
            return Err(SceneError::InvalidConfig {
                field: "tx_power_dbm",
                reason: "must be finite",
            });
        }
        if !self.noise_power_dbm.is_finite() {
            return Err(SceneError::InvalidConfig {
                field: "noise_power_dbm",
                reason: "must be finite",
            });
        }
        Ok(())
    }

    /// Center-carrier wavelength λ0.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.center_freq_hz
    }

    pub fn antennas_per_bs(&self) -> usize {
        self.upa_side * self.upa_side
    }

    /// Number of reciprocal BS pairs, monostatic pairs included.
    pub fn n_pairs(&self) -> usize {
        self.n_bs * (self.n_bs + 1) / 2
    }

    /// Length of the stacked measurement vector.
    pub fn n_measurements(&self) -> usize {
        let per_bs = self.antennas_per_bs();
        self.n_subcarriers * per_bs * per_bs * self.n_pairs()
    }
}

/// Regular voxelization of the region of interest.
///
/// Voxel `(i, j, k)` has center `origin + ((i+½)dx, (j+½)dy, (k+½)dz)` and
/// linear index `(k·ny + j)·nx + i`: x varies fastest, then y, then z. A 2D
/// slice (`nz = 1`) therefore reshapes row-major into an `ny × nx` image.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Default for VoxelGrid {
    /// 120 m × 120 m slice at 40 m altitude, 40×40 pixels of 3 m, centered on
    /// the BS layout.
    fn default() -> Self {
        Self::centered_slice(40, 40, 3.0, 40.0)
    }
}

impl VoxelGrid {
    /// A single-layer grid centered over the origin of the horizontal plane,
    /// with voxel centers at `altitude_m` (layer thickness 1 m).
    pub fn centered_slice(nx: usize, ny: usize, pixel_m: f64, altitude_m: f64) -> Self {
        Self {
            origin: [
                -(nx as f64) * pixel_m / 2.0,
                -(ny as f64) * pixel_m / 2.0,
                altitude_m - 0.5,
            ],
            nx,
            ny,
            nz: 1,
            dx: pixel_m,
            dy: pixel_m,
            dz: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (n, field) in [(self.nx, "nx"), (self.ny, "ny"), (self.nz, "nz")] {
            if n == 0 {
                return Err(SceneError::InvalidGrid {
                    field,
                    reason: "must be at least 1",
                });
            }
        }
        for (d, field) in [(self.dx, "dx"), (self.dy, "dy"), (self.dz, "dz")] {
            if !(d.is_finite() && d > 0.0) {
                return Err(SceneError::InvalidGrid {
                    field,
                    reason: "must be finite and strictly positive",
                });
            }
        }
        if self.origin.iter().any(|c| !c.is_finite()) {
            return Err(SceneError::InvalidGrid {
                field: "origin",
                reason: "must be finite",
            });
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Altitude of the middle of the ROI slab (ħ_roi).
    pub fn roi_height_m(&self) -> f64 {
        self.origin[2] + self.nz as f64 * self.dz / 2.0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        (k * self.ny + j) * self.nx + i
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        debug_assert!(index < self.n_voxels());
        let i = index % self.nx;
        let j = (index / self.nx) % self.ny;
        let k = index / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn center(&self, index: usize) -> Point3 {
        let (i, j, k) = self.coords(index);
        [
            self.origin[0] + (i as f64 + 0.5) * self.dx,
            self.origin[1] + (j as f64 + 0.5) * self.dy,
            self.origin[2] + (k as f64 + 0.5) * self.dz,
        ]
    }

    fn upper(&self) -> Point3 {
        [
            self.origin[0] + self.nx as f64 * self.dx,
            self.origin[1] + self.ny as f64 * self.dy,
            self.origin[2] + self.nz as f64 * self.dz,
        ]
    }

    /// Index of the voxel containing `p`; voxels are half-open boxes.
    pub fn voxel_of(&self, p: &Point3) -> Option<usize> {
        let upper = self.upper();
        let mut cell = [0usize; 3];
        let dims = [(self.nx, self.dx), (self.ny, self.dy), (self.nz, self.dz)];
        for axis in 0..3 {
            let (n, d) = dims[axis];
            if !(p[axis] >= self.origin[axis] && p[axis] < upper[axis]) {
                return None;
            }
            let c = libm::floor((p[axis] - self.origin[axis]) / d) as usize;
            // rounding can push a point just below the upper face into cell n
            cell[axis] = c.min(n - 1);
        }
        Some(self.index(cell[0], cell[1], cell[2]))
    }
}

/// All voxel centers in linear-index order.
pub fn voxel_centers(grid: &VoxelGrid) -> Vec<Point3> {
    (0..grid.n_voxels()).map(|v| grid.center(v)).collect()
}

/// A point scatterer. `scatter_coeff` is the square root of its RCS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: Point3,
    pub scatter_coeff: f64,
}

/// Targets together with their voxel-level ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub targets: Vec<Target>,
    pub truth_image: Vec<f64>,
}

impl Scene {
    pub fn new(targets: Vec<Target>, grid: &VoxelGrid) -> Result<Self, SceneError> {
        let truth_image = rasterize(&targets, grid)?;
        Ok(Self {
            targets,
            truth_image,
        })
    }

    /// Number of occupied voxels (K).
    pub fn support_size(&self) -> usize {
        self.truth_image.iter().filter(|&&s| s != 0.0).count()
    }
}

/// Assigns each target's coefficient to its containing voxel, summing
/// co-located targets.
pub fn rasterize(targets: &[Target], grid: &VoxelGrid) -> Result<Vec<f64>, SceneError> {
    let mut image = alloc::vec![0.0; grid.n_voxels()];
    for (index, t) in targets.iter().enumerate() {
        if !(t.scatter_coeff.is_finite() && t.scatter_coeff >= 0.0) {
            return Err(SceneError::BadCoefficient {
                index,
                value: t.scatter_coeff,
            });
        }
        let v = grid.voxel_of(&t.position).ok_or(SceneError::OutsideRoi {
            index,
            position: t.position,
        })?;
        image[v] += t.scatter_coeff;
    }
    Ok(image)
}

/// One uniform planar array: antenna positions plus its boresight.
#[derive(Debug, Clone, PartialEq)]
pub struct AntennaArray {
    pub center: Point3,
    /// Unit normal, horizontal, pointing at the layout centroid.
    pub normal: Point3,
    /// Element `row·N0 + col`; rows stack along z, columns run horizontally.
    pub positions: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsLayout {
    pub arrays: Vec<AntennaArray>,
}

impl BsLayout {
    pub fn n_bs(&self) -> usize {
        self.arrays.len()
    }

    pub fn antennas_per_bs(&self) -> usize {
        self.arrays.first().map_or(0, |a| a.positions.len())
    }

    pub fn antenna(&self, bs: usize, element: usize) -> &Point3 {
        &self.arrays[bs].positions[element]
    }
}

/// Places the BSs on a regular `n_bs`-gon of edge `bs_spacing_m` centered on
/// the z-axis, each carrying a vertical λ0/2-pitch UPA facing the centroid.
///
/// Vertex `b` sits at angle `(2b+1)π/n_bs`, so four BSs land on the corners
/// `(±s/2, ±s/2)` of an axis-aligned square.
pub fn build_bs_layout(config: &SystemConfig) -> Result<BsLayout, SceneError> {
    config.validate()?;
    let n = config.n_bs;
    let radius = config.bs_spacing_m / (2.0 * libm::sin(PI / n as f64));
    let pitch = config.wavelength() / 2.0;
    let side = config.upa_side;
    let half = (side as f64 - 1.0) / 2.0;

    let arrays = (0..n)
        .map(|b| {
            let angle = (2 * b + 1) as f64 * PI / n as f64;
            let (s, c) = libm::sincos(angle);
            let center = [radius * c, radius * s, config.bs_height_m];
            let normal = [-c, -s, 0.0];
            let horizontal = [-s, c, 0.0];
            let mut positions = Vec::with_capacity(side * side);
            for row in 0..side {
                let dz = (row as f64 - half) * pitch;
                for col in 0..side {
                    let dh = (col as f64 - half) * pitch;
                    positions.push([
                        center[0] + dh * horizontal[0],
                        center[1] + dh * horizontal[1],
                        center[2] + dz,
                    ]);
                }
            }
            AntennaArray {
                center,
                normal,
                positions,
            }
        })
        .collect();
    Ok(BsLayout { arrays })
}

/// Gaussian RCS model; draws at or below zero are rejected and redrawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcsModel {
    pub mean_m2: f64,
    pub variance_m4: f64,
}

impl Default for RcsModel {
    fn default() -> Self {
        Self {
            mean_m2: 0.01,
            variance_m4: 0.001,
        }
    }
}

impl RcsModel {
    pub fn sample_coeff<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.mean_m2, libm::sqrt(self.variance_m4))
            .expect("RCS variance must be finite and non-negative");
        loop {
            let rcs = normal.sample(rng);
            if rcs > 0.0 {
                return libm::sqrt(rcs);
            }
        }
    }
}

/// Draws a random scene: `K` uniform in `k_range`, positions either uniform
/// in the ROI or on distinct random voxel centers.
///
/// Axes with a single voxel are treated as a slice: off-grid targets keep that
/// axis at the voxel center instead of spreading through the layer thickness.
pub fn sample_targets<R: Rng + ?Sized>(
    grid: &VoxelGrid,
    k_range: RangeInclusive<usize>,
    on_grid: bool,
    rcs: &RcsModel,
    rng: &mut R,
) -> Result<Vec<Target>, SceneError> {
    grid.validate()?;
    if k_range.is_empty() {
        return Err(SceneError::EmptyRange);
    }
    let n_v = grid.n_voxels();
    if on_grid && *k_range.end() > n_v {
        return Err(SceneError::TooManyTargets {
            requested: *k_range.end(),
            voxels: n_v,
        });
    }
    let k = rng.random_range(k_range);

    let positions: Vec<Point3> = if on_grid {
        rand::seq::index::sample(rng, n_v, k)
            .into_iter()
            .map(|v| grid.center(v))
            .collect()
    } else {
        let dims = [(grid.nx, grid.dx), (grid.ny, grid.dy), (grid.nz, grid.dz)];
        (0..k)
            .map(|_| {
                let mut p = [0.0; 3];
                for axis in 0..3 {
                    let (n, d) = dims[axis];
                    p[axis] = if n == 1 {
                        grid.origin[axis] + 0.5 * d
                    } else {
                        grid.origin[axis] + rng.random_range(0.0..n as f64 * d)
                    };
                }
                p
            })
            .collect()
    };

    Ok(positions
        .into_iter()
        .map(|position| Target {
            position,
            scatter_coeff: rcs.sample_coeff(rng),
        })
        .collect())
}

/// Convenience wrapper: sample targets and rasterize them into a [`Scene`].
pub fn sample_scene<R: Rng + ?Sized>(
    grid: &VoxelGrid,
    k_range: RangeInclusive<usize>,
    on_grid: bool,
    rng: &mut R,
) -> Result<Scene, SceneError> {
    let targets = sample_targets(grid, k_range, on_grid, &RcsModel::default(), rng)?;
    Scene::new(targets, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{distance, rng::seeded};
    use proptest::prelude::*;
    use std::vec;

    #[test]
    fn square_layout_single_antennas_at_corners() {
        let config = SystemConfig {
            upa_side: 1,
            ..SystemConfig::default()
        };
        let layout = build_bs_layout(&config).unwrap();
        assert_eq!(layout.n_bs(), 4);
        let mut corners: Vec<[i64; 3]> = layout
            .arrays
            .iter()
            .map(|a| {
                assert_eq!(a.positions.len(), 1);
                assert_eq!(a.positions[0], a.center);
                let p = a.positions[0];
                [
                    (p[0] * 1e6).round() as i64,
                    (p[1] * 1e6).round() as i64,
                    (p[2] * 1e6).round() as i64,
                ]
            })
            .collect();
        corners.sort();
        let c = 70_000_000;
        let h = 20_000_000;
        assert_eq!(
            corners,
            vec![[-c, -c, h], [-c, c, h], [c, -c, h], [c, c, h]]
        );
    }

    #[test]
    fn upa_pitch_is_half_wavelength() {
        let config = SystemConfig::default();
        let layout = build_bs_layout(&config).unwrap();
        let half = crate::SPEED_OF_LIGHT / (2.0 * 2.6e9);
        let n0 = config.upa_side;
        for array in &layout.arrays {
            for row in 0..n0 {
                for col in 0..n0 {
                    let p = array.positions[row * n0 + col];
                    if col + 1 < n0 {
                        let q = array.positions[row * n0 + col + 1];
                        assert!((distance(&p, &q) - half).abs() < 1e-12);
                    }
                    if row + 1 < n0 {
                        let q = array.positions[(row + 1) * n0 + col];
                        assert!((distance(&p, &q) - half).abs() < 1e-12);
                        assert!((q[2] - p[2] - half).abs() < 1e-12);
                    }
                }
            }
            // normal points at the centroid and is orthogonal to the array plane
            let c = array.center;
            let towards = [-c[0], -c[1], 0.0];
            let norm = libm::sqrt(towards[0] * towards[0] + towards[1] * towards[1]);
            for (n, t) in array.normal.iter().zip(&towards) {
                assert!((n - t / norm).abs() < 1e-12);
            }
            let p0 = array.positions[0];
            let p1 = array.positions[1];
            let along = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let dot: f64 = (0..3).map(|a| along[a] * array.normal[a]).sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn layout_rejects_single_bs_and_is_deterministic() {
        let bad = SystemConfig {
            n_bs: 1,
            ..SystemConfig::default()
        };
        assert_eq!(
            build_bs_layout(&bad),
            Err(SceneError::TooFewBaseStations(1))
        );
        let a = build_bs_layout(&SystemConfig::default()).unwrap();
        let b = build_bs_layout(&SystemConfig::default()).unwrap();
        for (x, y) in a.arrays.iter().zip(&b.arrays) {
            for (p, q) in x.positions.iter().zip(&y.positions) {
                for axis in 0..3 {
                    assert_eq!(p[axis].to_bits(), q[axis].to_bits());
                }
            }
        }
    }

    #[test]
    fn single_voxel_center() {
        let grid = VoxelGrid {
            origin: [0.0, 0.0, 40.0],
            nx: 1,
            ny: 1,
            nz: 1,
            dx: 3.0,
            dy: 3.0,
            dz: 1.0,
        };
        assert_eq!(voxel_centers(&grid), vec![[1.5, 1.5, 40.5]]);
    }

    #[test]
    fn default_grid_has_1600_centers_at_40m() {
        let grid = VoxelGrid::default();
        let centers = voxel_centers(&grid);
        assert_eq!(centers.len(), 1600);
        assert!(centers.iter().all(|c| c[2] == 40.0));
        assert_eq!(grid.roi_height_m(), 40.0);
        assert_eq!(centers[0], [-58.5, -58.5, 40.0]);
        assert_eq!(centers[1599], [58.5, 58.5, 40.0]);
    }

    #[test]
    fn two_by_two_lattice() {
        let grid = VoxelGrid {
            origin: [0.0, 0.0, 0.0],
            nx: 2,
            ny: 2,
            nz: 1,
            dx: 2.0,
            dy: 5.0,
            dz: 1.0,
        };
        assert_eq!(
            voxel_centers(&grid),
            vec![
                [1.0, 2.5, 0.5],
                [3.0, 2.5, 0.5],
                [1.0, 7.5, 0.5],
                [3.0, 7.5, 0.5]
            ]
        );
    }

    #[test]
    fn empty_k_range_gives_no_targets() {
        let mut rng = seeded(1);
        let t = sample_targets(&VoxelGrid::default(), 0..=0, false, &RcsModel::default(), &mut rng)
            .unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn mean_scatter_coefficient_matches_truncated_gaussian() {
        // E[sqrt(X) | X > 0] for X ~ N(0.01, 0.001), by midpoint quadrature.
        let (mu, sd) = (0.01f64, libm::sqrt(0.001));
        let pdf = |x: f64| libm::exp(-0.5 * ((x - mu) / sd).powi(2));
        let (mut num, mut den) = (0.0, 0.0);
        let n = 200_000;
        let hi = mu + 12.0 * sd;
        let h = hi / n as f64;
        for i in 0..n {
            let x = (i as f64 + 0.5) * h;
            num += libm::sqrt(x) * pdf(x);
            den += pdf(x);
        }
        let expected = num / den;
        assert!((expected - 0.1584).abs() < 1e-3);

        let mut rng = seeded(42);
        let model = RcsModel::default();
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| model.sample_coeff(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean / expected - 1.0).abs() < 0.02, "{mean} vs {expected}");
    }

    #[test]
    fn on_grid_targets_sit_on_distinct_centers() {
        let grid = VoxelGrid::centered_slice(10, 10, 3.0, 40.0);
        let centers = voxel_centers(&grid);
        let mut rng = seeded(3);
        for _ in 0..50 {
            let t = sample_targets(&grid, 3..=3, true, &RcsModel::default(), &mut rng).unwrap();
            assert_eq!(t.len(), 3);
            let idx: Vec<usize> = t
                .iter()
                .map(|t| centers.iter().position(|c| *c == t.position).unwrap())
                .collect();
            assert!(idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2]);
        }
    }

    #[test]
    fn on_grid_rejects_too_many_targets() {
        let grid = VoxelGrid::centered_slice(2, 2, 3.0, 40.0);
        let mut rng = seeded(0);
        assert_eq!(
            sample_targets(&grid, 1..=5, true, &RcsModel::default(), &mut rng),
            Err(SceneError::TooManyTargets {
                requested: 5,
                voxels: 4
            })
        );
    }

    #[test]
    fn off_grid_targets_stay_in_roi_slice() {
        let grid = VoxelGrid::default();
        let mut rng = seeded(9);
        for _ in 0..100 {
            let t = sample_targets(&grid, 1..=5, false, &RcsModel::default(), &mut rng).unwrap();
            assert!((1..=5).contains(&t.len()));
            for target in &t {
                assert!(grid.voxel_of(&target.position).is_some());
                assert_eq!(target.position[2], 40.0);
                assert!(target.scatter_coeff > 0.0);
            }
        }
    }

    #[test]
    fn rasterize_cases() {
        let grid = VoxelGrid {
            origin: [0.0, 0.0, 39.5],
            nx: 4,
            ny: 4,
            nz: 1,
            dx: 3.0,
            dy: 3.0,
            dz: 1.0,
        };
        assert_eq!(rasterize(&[], &grid).unwrap(), vec![0.0; 16]);

        let on = Target {
            position: grid.center(6),
            scatter_coeff: 0.1,
        };
        let img = rasterize(&[on], &grid).unwrap();
        assert_eq!(img[6], 0.1);
        assert_eq!(img.iter().filter(|&&x| x != 0.0).count(), 1);

        let off = Target {
            position: [1.4, 1.4, 40.0],
            scatter_coeff: 0.2,
        };
        let img = rasterize(&[off], &grid).unwrap();
        assert_eq!(img[grid.index(0, 0, 0)], 0.2);

        let outside = Target {
            position: [12.0, 1.0, 40.0],
            scatter_coeff: 0.2,
        };
        assert!(matches!(
            rasterize(&[outside], &grid),
            Err(SceneError::OutsideRoi { index: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn linear_index_round_trip(nx in 1usize..8, ny in 1usize..8, nz in 1usize..4) {
            let grid = VoxelGrid { origin: [0.0; 3], nx, ny, nz, dx: 1.0, dy: 2.0, dz: 3.0 };
            for v in 0..grid.n_voxels() {
                let (i, j, k) = grid.coords(v);
                prop_assert_eq!(grid.index(i, j, k), v);
                prop_assert_eq!(grid.voxel_of(&grid.center(v)), Some(v));
            }
        }

        #[test]
        fn rasterize_preserves_mass(seed in 0u64..500, on_grid in any::<bool>()) {
            let grid = VoxelGrid::centered_slice(6, 5, 3.0, 40.0);
            let mut rng = seeded(seed);
            let targets = sample_targets(&grid, 0..=6, on_grid, &RcsModel::default(), &mut rng).unwrap();
            let image = rasterize(&targets, &grid).unwrap();
            let total: f64 = targets.iter().map(|t| t.scatter_coeff).sum();
            prop_assert!((image.iter().sum::<f64>() - total).abs() < 1e-12);
            let mut occupied: Vec<usize> = targets.iter().map(|t| grid.voxel_of(&t.position).unwrap()).collect();
            occupied.sort();
            occupied.dedup();
            prop_assert_eq!(image.iter().filter(|&&x| x != 0.0).count(), occupied.len());
            prop_assert!(image.iter().all(|&x| x >= 0.0));
        }
    }
}

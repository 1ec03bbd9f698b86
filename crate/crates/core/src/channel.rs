//! Forward CSI synthesis, the precoded signal chain with LS channel
//! estimation, and the stacked measurement layout.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{complex_gaussian, condition_number, random_gaussian_matrix};
use crate::scene::{BsLayout, Scene, SceneError, SystemConfig, Target};
use crate::{dbm_to_watts, distance, Point3, SPEED_OF_LIGHT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("target at {position:?} coincides with an antenna")]
    CoincidentAntenna { position: Point3 },
    #[error("{which} is rank deficient (condition number {condition:e})")]
    RankDeficient { which: &'static str, condition: f64 },
    #[error("{which} has shape {got:?}, expected {expected:?}")]
    Shape {
        which: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("layout has {got} base stations, config declares {expected}")]
    LayoutMismatch { expected: usize, got: usize },
}

/// Subcarrier frequencies spread evenly over `[f0 - B/2, f0 + B/2]`,
/// endpoints included; a single subcarrier sits on `f0`.
pub fn subcarrier_frequencies(config: &SystemConfig) -> Vec<f64> {
    let n = config.n_subcarriers;
    if n == 1 {
        return alloc::vec![config.center_freq_hz];
    }
    let low = config.center_freq_hz - config.bandwidth_hz / 2.0;
    let step = config.bandwidth_hz / (n - 1) as f64;
    (0..n).map(|k| low + k as f64 * step).collect()
}

/// Wavelength of each subcarrier, in ascending frequency order.
pub fn subcarrier_wavelengths(config: &SystemConfig) -> Vec<f64> {
    subcarrier_frequencies(config)
        .into_iter()
        .map(|f| SPEED_OF_LIGHT / f)
        .collect()
}

/// `exp(-j2π·cycles)` with the whole cycles removed before the trig call.
pub(crate) fn phasor(cycles: f64) -> Complex64 {
    let frac = cycles - libm::floor(cycles);
    let (s, c) = libm::sincos(2.0 * PI * frac);
    Complex64::new(c, -s)
}

fn csi_from_distances(coeff: f64, d1: f64, d2: f64, wavelength: f64) -> Complex64 {
    phasor((d1 + d2) / wavelength) * (coeff / (4.0 * PI * d1 * d2))
}

/// Bistatic response of one point scatterer:
/// `coeff · exp(-j2π(d1+d2)/λ) / (4π d1 d2)`.
pub fn point_target_csi(
    tx: &Point3,
    rx: &Point3,
    target: &Target,
    wavelength: f64,
) -> Result<Complex64, ChannelError> {
    let d1 = distance(tx, &target.position);
    let d2 = distance(rx, &target.position);
    if d1 == 0.0 || d2 == 0.0 {
        return Err(ChannelError::CoincidentAntenna {
            position: target.position,
        });
    }
    Ok(csi_from_distances(target.scatter_coeff, d1, d2, wavelength))
}

/// Decoded position of one entry of the stacked measurement vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasurementIndex {
    pub pair: usize,
    pub bs_tx: usize,
    pub bs_rx: usize,
    pub tx_element: usize,
    pub rx_element: usize,
    pub subcarrier: usize,
}

/// Ordering of the stacked CSI vector.
///
/// BS pairs `(b1, b2)` with `b1 ≤ b2` are enumerated lexicographically (each
/// reciprocal pair once, monostatic pairs included). Within a pair the entry
/// for transmit element `nt`, receive element `nr` and subcarrier `nf` sits at
/// `((p·Na + nt)·Na + nr)·Nf + nf`, so the subcarrier varies fastest. The
/// sensing matrix uses the same row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementLayout {
    pub pairs: Vec<(usize, usize)>,
    pub antennas_per_bs: usize,
    pub n_subcarriers: usize,
}

impl MeasurementLayout {
    pub fn new(n_bs: usize, antennas_per_bs: usize, n_subcarriers: usize) -> Self {
        let mut pairs = Vec::with_capacity(n_bs * (n_bs + 1) / 2);
        for b1 in 0..n_bs {
            for b2 in b1..n_bs {
                pairs.push((b1, b2));
            }
        }
        Self {
            pairs,
            antennas_per_bs,
            n_subcarriers,
        }
    }

    pub fn from_config(config: &SystemConfig) -> Self {
        Self::new(config.n_bs, config.antennas_per_bs(), config.n_subcarriers)
    }

    pub fn len(&self) -> usize {
        self.pairs.len() * self.block_len()
    }

    /// Number of base stations covered by the pair list.
    pub fn n_bs(&self) -> usize {
        self.pairs.iter().map(|&(_, b2)| b2 + 1).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries per BS pair: `Na² · Nf`.
    pub fn block_len(&self) -> usize {
        self.antennas_per_bs * self.antennas_per_bs * self.n_subcarriers
    }

    pub fn index(&self, pair: usize, tx_element: usize, rx_element: usize, subcarrier: usize) -> usize {
        let na = self.antennas_per_bs;
        ((pair * na + tx_element) * na + rx_element) * self.n_subcarriers + subcarrier
    }

    pub fn decode(&self, index: usize) -> MeasurementIndex {
        let na = self.antennas_per_bs;
        let subcarrier = index % self.n_subcarriers;
        let rest = index / self.n_subcarriers;
        let rx_element = rest % na;
        let rest = rest / na;
        let tx_element = rest % na;
        let pair = rest / na;
        let (bs_tx, bs_rx) = self.pairs[pair];
        MeasurementIndex {
            pair,
            bs_tx,
            bs_rx,
            tx_element,
            rx_element,
            subcarrier,
        }
    }
}

/// Stacked CSI vector `y` with its index layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Vec<Complex64>,
    pub layout: MeasurementLayout,
    /// Standard deviation of the complex noise on each entry (0 when noiseless).
    pub noise_std: f64,
}

/// Whether [`synthesize_csi`] adds estimation noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Off,
    On,
}

/// Per-entry variance of the CSI estimation noise,
/// `P_noise / (P_t · g²)` in linear units.
pub fn csi_noise_variance(config: &SystemConfig) -> f64 {
    let g = config.aperture_gain;
    dbm_to_watts(config.noise_power_dbm) / (dbm_to_watts(config.tx_power_dbm) * g * g)
}

fn check_layout(config: &SystemConfig, layout: &BsLayout) -> Result<(), ChannelError> {
    config.validate()?;
    if layout.n_bs() != config.n_bs {
        return Err(ChannelError::LayoutMismatch {
            expected: config.n_bs,
            got: layout.n_bs(),
        });
    }
    Ok(())
}

/// Noise-free stacked CSI of a set of continuous point targets.
pub fn noiseless_csi(
    targets: &[Target],
    config: &SystemConfig,
    layout: &BsLayout,
) -> Result<Vec<Complex64>, ChannelError> {
    check_layout(config, layout)?;
    let mlayout = MeasurementLayout::from_config(config);
    let wavelengths = subcarrier_wavelengths(config);
    let na = config.antennas_per_bs();
    let nf = config.n_subcarriers;
    let mut y = alloc::vec![Complex64::new(0.0, 0.0); mlayout.len()];

    for target in targets {
        // distance from every antenna of every BS to the target
        let mut dist = Vec::with_capacity(config.n_bs * na);
        for array in &layout.arrays {
            for p in &array.positions {
                let d = distance(p, &target.position);
                if d == 0.0 {
                    return Err(ChannelError::CoincidentAntenna {
                        position: target.position,
                    });
                }
                dist.push(d);
            }
        }
        let mut row = 0;
        for &(b1, b2) in &mlayout.pairs {
            for nt in 0..na {
                let d1 = dist[b1 * na + nt];
                for nr in 0..na {
                    let d2 = dist[b2 * na + nr];
                    for lambda in &wavelengths[..nf] {
                        y[row] += csi_from_distances(target.scatter_coeff, d1, d2, *lambda);
                        row += 1;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Synthesizes the stacked CSI measurement of `scene`.
///
/// The channel is summed over the continuous target positions (not voxel
/// centers), so off-grid scenes yield the mismatched ground-truth channel.
/// With [`Noise::On`] each entry receives circularly-symmetric complex
/// Gaussian noise of variance [`csi_noise_variance`].
pub fn synthesize_csi<R: Rng + ?Sized>(
    scene: &Scene,
    config: &SystemConfig,
    layout: &BsLayout,
    noise: Noise,
    rng: &mut R,
) -> Result<Measurement, ChannelError> {
    let mut y = noiseless_csi(&scene.targets, config, layout)?;
    let noise_std = match noise {
        Noise::Off => 0.0,
        Noise::On => {
            let variance = csi_noise_variance(config);
            for entry in &mut y {
                *entry += complex_gaussian(rng, variance);
            }
            libm::sqrt(variance)
        }
    };
    Ok(Measurement {
        y,
        layout: MeasurementLayout::from_config(config),
        noise_std,
    })
}

/// Precoders, combiners and pilot data for the explicit signal-chain path.
///
/// Every matrix is `N0² × N0²`; `data[b][f]` is the pilot block sent by BS `b`
/// on subcarrier `f` over `N_s = N0²` symbol intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalChainConfig {
    pub precoders: Vec<DMatrix<Complex64>>,
    pub combiners: Vec<DMatrix<Complex64>>,
    pub data: Vec<Vec<DMatrix<Complex64>>>,
}

/// Largest condition number accepted as numerically full rank.
pub const FULL_RANK_CONDITION: f64 = 1e12;

impl SignalChainConfig {
    pub fn n_symbols(&self) -> usize {
        self.precoders.first().map_or(0, |m| m.ncols())
    }

    /// Identity precoders, combiners and data.
    pub fn identity(config: &SystemConfig) -> Self {
        let n = config.antennas_per_bs();
        let eye = DMatrix::<Complex64>::identity(n, n);
        Self {
            precoders: alloc::vec![eye.clone(); config.n_bs],
            combiners: alloc::vec![eye.clone(); config.n_bs],
            data: alloc::vec![alloc::vec![eye; config.n_subcarriers]; config.n_bs],
        }
    }

    /// Random complex Gaussian matrices, each redrawn until its condition
    /// number is below `max_condition`.
    pub fn random<R: Rng + ?Sized>(config: &SystemConfig, max_condition: f64, rng: &mut R) -> Self {
        let n = config.antennas_per_bs();
        let draw = |rng: &mut R| loop {
            let m = random_gaussian_matrix(rng, n);
            if condition_number(&m) < max_condition {
                return m;
            }
        };
        let precoders = (0..config.n_bs).map(|_| draw(rng)).collect();
        let combiners = (0..config.n_bs).map(|_| draw(rng)).collect();
        let data = (0..config.n_bs)
            .map(|_| (0..config.n_subcarriers).map(|_| draw(rng)).collect())
            .collect();
        Self {
            precoders,
            combiners,
            data,
        }
    }

    pub fn validate(&self, config: &SystemConfig) -> Result<(), ChannelError> {
        let n = config.antennas_per_bs();
        let check = |which: &'static str, m: &DMatrix<Complex64>| {
            if m.shape() != (n, n) {
                return Err(ChannelError::Shape {
                    which,
                    expected: (n, n),
                    got: m.shape(),
                });
            }
            let condition = condition_number(m);
            if !(condition < FULL_RANK_CONDITION) {
                return Err(ChannelError::RankDeficient { which, condition });
            }
            Ok(())
        };
        if self.precoders.len() != config.n_bs
            || self.combiners.len() != config.n_bs
            || self.data.len() != config.n_bs
        {
            return Err(ChannelError::LayoutMismatch {
                expected: config.n_bs,
                got: self.precoders.len().min(self.combiners.len()).min(self.data.len()),
            });
        }
        for m in &self.precoders {
            check("precoder", m)?;
        }
        for m in &self.combiners {
            check("combiner", m)?;
        }
        for per_bs in &self.data {
            if per_bs.len() != config.n_subcarriers {
                return Err(ChannelError::Shape {
                    which: "data",
                    expected: (config.n_subcarriers, 1),
                    got: (per_bs.len(), 1),
                });
            }
            for m in per_bs {
                check("data", m)?;
            }
        }
        Ok(())
    }
}

/// Channel matrix `H` of one BS pair on one subcarrier; entry `(nt, nr)` is
/// the response from transmit element `nt` of `bs_tx` to receive element `nr`
/// of `bs_rx`.
pub fn channel_matrix(
    targets: &[Target],
    layout: &BsLayout,
    bs_tx: usize,
    bs_rx: usize,
    wavelength: f64,
) -> Result<DMatrix<Complex64>, ChannelError> {
    let tx = &layout.arrays[bs_tx].positions;
    let rx = &layout.arrays[bs_rx].positions;
    let mut h = DMatrix::zeros(tx.len(), rx.len());
    for (nt, pt) in tx.iter().enumerate() {
        for (nr, pr) in rx.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for target in targets {
                acc += point_target_csi(pt, pr, target, wavelength)?;
            }
            h[(nt, nr)] = acc;
        }
    }
    Ok(h)
}

/// Received pilot block of one BS pair on one subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBlock {
    pub pair: usize,
    pub bs_tx: usize,
    pub bs_rx: usize,
    pub subcarrier: usize,
    pub s: DMatrix<Complex64>,
}

/// Simulates `S = √P_t·g·F^c H F^p X + Z` for every BS pair and subcarrier,
/// in measurement-layout order. With [`Noise::On`], `Z` has i.i.d. entries of
/// the per-antenna noise power.
pub fn simulate_signal_chain<R: Rng + ?Sized>(
    scene: &Scene,
    config: &SystemConfig,
    layout: &BsLayout,
    chain: &SignalChainConfig,
    noise: Noise,
    rng: &mut R,
) -> Result<Vec<SignalBlock>, ChannelError> {
    check_layout(config, layout)?;
    chain.validate(config)?;
    let amplitude = libm::sqrt(dbm_to_watts(config.tx_power_dbm)) * config.aperture_gain;
    let noise_power = dbm_to_watts(config.noise_power_dbm);
    let wavelengths = subcarrier_wavelengths(config);
    let mlayout = MeasurementLayout::from_config(config);

    let mut blocks = Vec::with_capacity(mlayout.pairs.len() * config.n_subcarriers);
    for (pair, &(bs_tx, bs_rx)) in mlayout.pairs.iter().enumerate() {
        for (f, &lambda) in wavelengths.iter().enumerate() {
            let h = channel_matrix(&scene.targets, layout, bs_tx, bs_rx, lambda)?;
            let mut s = (&chain.combiners[bs_rx] * h * &chain.precoders[bs_tx] * &chain.data[bs_tx][f])
                * Complex64::new(amplitude, 0.0);
            if noise == Noise::On {
                for z in s.iter_mut() {
                    *z += complex_gaussian(rng, noise_power);
                }
            }
            blocks.push(SignalBlock {
                pair,
                bs_tx,
                bs_rx,
                subcarrier: f,
                s,
            });
        }
    }
    Ok(blocks)
}

fn invert(m: &DMatrix<Complex64>, which: &'static str) -> Result<DMatrix<Complex64>, ChannelError> {
    let condition = condition_number(m);
    if !(condition < FULL_RANK_CONDITION) {
        return Err(ChannelError::RankDeficient { which, condition });
    }
    m.clone()
        .try_inverse()
        .ok_or(ChannelError::RankDeficient { which, condition })
}

/// LS channel estimate `Ĥ = (F^c)⁻¹ S X⁻¹ (F^p)⁻¹ / (√P_t·g)` for one block.
pub fn ls_estimate_channel(
    block: &SignalBlock,
    chain: &SignalChainConfig,
    config: &SystemConfig,
) -> Result<DMatrix<Complex64>, ChannelError> {
    let n = config.antennas_per_bs();
    if block.s.shape() != (n, n) {
        return Err(ChannelError::Shape {
            which: "received block",
            expected: (n, n),
            got: block.s.shape(),
        });
    }
    let fc_inv = invert(&chain.combiners[block.bs_rx], "combiner")?;
    let x_inv = invert(&chain.data[block.bs_tx][block.subcarrier], "data")?;
    let fp_inv = invert(&chain.precoders[block.bs_tx], "precoder")?;
    let scale = 1.0 / (libm::sqrt(dbm_to_watts(config.tx_power_dbm)) * config.aperture_gain);
    Ok(fc_inv * &block.s * x_inv * fp_inv * Complex64::new(scale, 0.0))
}

/// Runs [`ls_estimate_channel`] on every block and stacks the estimates in
/// measurement-layout order.
pub fn estimate_measurement(
    blocks: &[SignalBlock],
    chain: &SignalChainConfig,
    config: &SystemConfig,
) -> Result<Measurement, ChannelError> {
    let layout = MeasurementLayout::from_config(config);
    let mut y = alloc::vec![Complex64::new(0.0, 0.0); layout.len()];
    for block in blocks {
        let h = ls_estimate_channel(block, chain, config)?;
        for nt in 0..layout.antennas_per_bs {
            for nr in 0..layout.antennas_per_bs {
                y[layout.index(block.pair, nt, nr, block.subcarrier)] = h[(nt, nr)];
            }
        }
    }
    Ok(Measurement {
        y,
        layout,
        noise_std: libm::sqrt(csi_noise_variance(config)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::scene::{build_bs_layout, sample_scene, VoxelGrid};
    use std::vec;

    fn small_config() -> SystemConfig {
        SystemConfig {
            upa_side: 2,
            n_subcarriers: 2,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn single_subcarrier_sits_on_carrier() {
        let config = SystemConfig {
            n_subcarriers: 1,
            ..SystemConfig::default()
        };
        let l = subcarrier_wavelengths(&config);
        assert_eq!(l, vec![SPEED_OF_LIGHT / 2.6e9]);
        assert!((l[0] - 0.1153).abs() < 1e-4);
    }

    #[test]
    fn two_subcarriers_at_band_edges() {
        let config = SystemConfig {
            n_subcarriers: 2,
            bandwidth_hz: 20e6,
            ..SystemConfig::default()
        };
        assert_eq!(subcarrier_frequencies(&config), vec![2.6e9 - 10e6, 2.6e9 + 10e6]);
        let config = SystemConfig {
            n_subcarriers: 7,
            ..SystemConfig::default()
        };
        let l = subcarrier_wavelengths(&config);
        assert!(l.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn point_target_csi_cases() {
        let tx = [0.0, 0.0, 0.0];
        let rx = [0.0, 0.0, 2.0];
        let target = Target {
            position: [0.0, 0.0, 1.0],
            scatter_coeff: 4.0 * PI,
        };
        assert_eq!(
            point_target_csi(&tx, &rx, &target, 1.0).unwrap(),
            Complex64::new(1.0, 0.0)
        );
        let zero = Target {
            scatter_coeff: 0.0,
            ..target
        };
        assert_eq!(
            point_target_csi(&tx, &rx, &zero, 0.3).unwrap(),
            Complex64::new(0.0, 0.0)
        );
        let on_antenna = Target {
            position: tx,
            scatter_coeff: 1.0,
        };
        assert!(matches!(
            point_target_csi(&tx, &rx, &on_antenna, 0.3),
            Err(ChannelError::CoincidentAntenna { .. })
        ));
    }

    #[test]
    fn magnitude_is_wavelength_independent_and_reciprocal() {
        let tx = [70.0, 70.0, 20.0];
        let rx = [-70.0, 70.0, 20.1];
        let target = Target {
            position: [3.3, -12.7, 40.0],
            scatter_coeff: 0.13,
        };
        let d1 = distance(&tx, &target.position);
        let d2 = distance(&rx, &target.position);
        let expected = 0.13 / (4.0 * PI * d1 * d2);
        for lambda in [0.1, 0.1153, 0.37] {
            let h = point_target_csi(&tx, &rx, &target, lambda).unwrap();
            assert!((h.norm() / expected - 1.0).abs() < 1e-12);
            let back = point_target_csi(&rx, &tx, &target, lambda).unwrap();
            assert!((h - back).norm() <= 1e-15 * h.norm());
        }
    }

    #[test]
    fn layout_index_round_trip() {
        let layout = MeasurementLayout::new(4, 4, 3);
        assert_eq!(layout.pairs.len(), 10);
        assert_eq!(layout.len(), 10 * 16 * 3);
        for i in 0..layout.len() {
            let m = layout.decode(i);
            assert!(m.bs_tx <= m.bs_rx);
            assert_eq!(layout.index(m.pair, m.tx_element, m.rx_element, m.subcarrier), i);
        }
        let full = MeasurementLayout::from_config(&SystemConfig::default());
        assert_eq!(full.len(), 4 * 625 * 10);
    }

    #[test]
    fn empty_scene_noiseless_is_zero() {
        let config = small_config();
        let layout = build_bs_layout(&config).unwrap();
        let scene = Scene::new(vec![], &VoxelGrid::default()).unwrap();
        let m = synthesize_csi(&scene, &config, &layout, Noise::Off, &mut seeded(0)).unwrap();
        assert_eq!(m.y.len(), config.n_measurements());
        assert!(m.y.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert_eq!(m.noise_std, 0.0);
    }

    #[test]
    fn noise_variance_matches_config() {
        let config = SystemConfig::default();
        let layout = build_bs_layout(&config).unwrap();
        let scene = Scene::new(vec![], &VoxelGrid::default()).unwrap();
        let m = synthesize_csi(&scene, &config, &layout, Noise::On, &mut seeded(5)).unwrap();
        assert!(m.y.len() >= 25_000);
        // -110 dBm noise over 40 dBm transmit power with unit gain
        let expected = 1e-15;
        assert!((csi_noise_variance(&config) / expected - 1.0).abs() < 1e-12);
        let mut entries = m.y.clone();
        let mut extra = seeded(6);
        while entries.len() < 100_000 {
            entries.extend(
                synthesize_csi(&scene, &config, &layout, Noise::On, &mut extra)
                    .unwrap()
                    .y,
            );
        }
        let var = entries.iter().map(|z| z.norm_sqr()).sum::<f64>() / entries.len() as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn csi_is_linear_in_targets() {
        let config = small_config();
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid::default();
        let mut rng = seeded(11);
        let scene = sample_scene(&grid, 2..=2, false, &mut rng).unwrap();
        let both = noiseless_csi(&scene.targets, &config, &layout).unwrap();
        let a = noiseless_csi(&scene.targets[..1], &config, &layout).unwrap();
        let b = noiseless_csi(&scene.targets[1..], &config, &layout).unwrap();
        for i in 0..both.len() {
            assert!((both[i] - (a[i] + b[i])).norm() <= 1e-15 * both[i].norm().max(1e-30));
        }
    }

    #[test]
    fn identity_chain_scales_channel() {
        let config = small_config();
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid::default();
        let mut rng = seeded(2);
        let scene = sample_scene(&grid, 3..=3, false, &mut rng).unwrap();
        let chain = SignalChainConfig::identity(&config);
        let blocks = simulate_signal_chain(&scene, &config, &layout, &chain, Noise::Off, &mut rng).unwrap();
        let amp = libm::sqrt(dbm_to_watts(config.tx_power_dbm));
        let wl = subcarrier_wavelengths(&config);
        for b in &blocks {
            let h = channel_matrix(&scene.targets, &layout, b.bs_tx, b.bs_rx, wl[b.subcarrier]).unwrap();
            let expected = h * Complex64::new(amp, 0.0);
            assert!((&b.s - &expected).norm() <= 1e-14 * expected.norm());
        }

        // doubling the power scales S by √2
        let louder = SystemConfig {
            tx_power_dbm: config.tx_power_dbm + 10.0 * libm::log10(2.0),
            ..config.clone()
        };
        let blocks2 = simulate_signal_chain(&scene, &louder, &layout, &chain, Noise::Off, &mut rng).unwrap();
        for (a, b) in blocks.iter().zip(&blocks2) {
            let scaled = &a.s * Complex64::new(core::f64::consts::SQRT_2, 0.0);
            assert!((&b.s - &scaled).norm() <= 1e-12 * scaled.norm());
        }
    }

    #[test]
    fn ls_estimate_round_trip_and_zero() {
        let config = small_config();
        let layout = build_bs_layout(&config).unwrap();
        let grid = VoxelGrid::default();
        let mut rng = seeded(21);
        let scene = sample_scene(&grid, 1..=4, false, &mut rng).unwrap();
        let chain = SignalChainConfig::random(&config, 1e3, &mut rng);
        let blocks = simulate_signal_chain(&scene, &config, &layout, &chain, Noise::Off, &mut rng).unwrap();
        let est = estimate_measurement(&blocks, &chain, &config).unwrap();
        let truth = noiseless_csi(&scene.targets, &config, &layout).unwrap();
        let err: f64 = est.y.iter().zip(&truth).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
        assert!(libm::sqrt(err / den) <= 1e-8);

        let zero_block = SignalBlock {
            s: DMatrix::zeros(4, 4),
            ..blocks[0].clone()
        };
        let h = ls_estimate_channel(&zero_block, &chain, &config).unwrap();
        assert!(h.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn ls_noise_variance_follows_power_and_gain() {
        let config = SystemConfig {
            upa_side: 1,
            n_subcarriers: 1,
            n_bs: 2,
            aperture_gain: 2.0,
            ..SystemConfig::default()
        };
        let layout = build_bs_layout(&config).unwrap();
        let scene = Scene::new(vec![], &VoxelGrid::default()).unwrap();
        let chain = SignalChainConfig::identity(&config);
        let mut rng = seeded(4);
        let mut acc = 0.0;
        let mut n = 0usize;
        while n < 10_000 {
            let blocks = simulate_signal_chain(&scene, &config, &layout, &chain, Noise::On, &mut rng).unwrap();
            for b in &blocks {
                let h = ls_estimate_channel(b, &chain, &config).unwrap();
                acc += h.iter().map(|z| z.norm_sqr()).sum::<f64>();
                n += h.len();
            }
        }
        let v = dbm_to_watts(config.noise_power_dbm);
        let expected = v / (dbm_to_watts(config.tx_power_dbm) * 4.0);
        assert!(((acc / n as f64) / expected - 1.0).abs() < 0.05);
        assert!((expected / csi_noise_variance(&config) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_chain_is_rejected() {
        let config = small_config();
        let layout = build_bs_layout(&config).unwrap();
        let mut chain = SignalChainConfig::identity(&config);
        chain.precoders[1][(2, 2)] = Complex64::new(0.0, 0.0);
        let scene = Scene::new(vec![], &VoxelGrid::default()).unwrap();
        let err = simulate_signal_chain(&scene, &config, &layout, &chain, Noise::Off, &mut seeded(0));
        assert!(matches!(
            err,
            Err(ChannelError::RankDeficient { which: "precoder", .. })
        ));
    }
}

//! Imaging-based low-altitude surveillance with a cooperative multi-BS ISAC network.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece of the
//! pipeline:
//!
//! * [`scene`]: network geometry, the voxelized region of interest and random UAV scenes.
//! * [`channel`]: multi-static CSI synthesis from continuous target positions, the
//!   optional precoder/combiner signal chain with LS channel estimation, and the
//!   stacked measurement layout.
//! * [`imaging`]: the on-grid sensing matrix (materialized or matrix-free), the
//!   matched filter and subspace pursuit.
//! * [`metrics`]: MSE, global SSIM, detection rate and false detection rate.
//! * [`learning`]: the hard-example-mining loss, the residual refiner network,
//!   dataset generation, training and inference.
//!
//! File formats, the command line and the Monte-Carlo harness live in the `lowalt`
//! companion crate.
#![no_std]
// Validation reads `!(x < limit)` on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod channel;
pub mod imaging;
pub mod learning;
mod linalg;
pub mod metrics;
pub mod rng;
pub mod scene;

pub use channel::{Measurement, MeasurementLayout, SignalChainConfig};
pub use imaging::{ImageEstimate, SensingMatrix, SpOptions};
pub use metrics::MetricsRecord;
pub use scene::{BsLayout, Scene, SystemConfig, Target, VoxelGrid};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A point in the 3D scene frame, in meters.
pub type Point3 = [f64; 3];

pub(crate) fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    libm::sqrt(dx * dx + dy * dy + dz * dz)
}

/// Converts a power in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    libm::pow(10.0, (dbm - 30.0) / 10.0)
}

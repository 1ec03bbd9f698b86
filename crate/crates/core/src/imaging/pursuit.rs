use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{ImagingError, SensingMatrix};
use crate::linalg::{condition_number, norm};

/// Supports whose columns have a larger condition number are rejected.
pub const MAX_LS_CONDITION: f64 = 1e12;

/// Reconstructed complex image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEstimate {
    pub sigma_hat: Vec<Complex64>,
}

impl ImageEstimate {
    pub fn magnitude(&self) -> Vec<f64> {
        self.sigma_hat.iter().map(|z| z.norm()).collect()
    }
}

/// Indices of the `k` largest-magnitude entries, ascending.
///
/// Equal magnitudes are resolved in favor of the lower index.
pub fn select_top_k(v: &[Complex64], k: usize) -> Result<Vec<usize>, ImagingError> {
    if k > v.len() {
        return Err(ImagingError::InvalidSparsity { k, len: v.len() });
    }
    let mags: Vec<f64> = v.iter().map(|z| z.norm_sqr()).collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let order = |a: &usize, b: &usize| mags[*b].total_cmp(&mags[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, order);
    }
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

struct Fit {
    coefficients: Vec<Complex64>,
    residual: Vec<Complex64>,
}

fn fit(y: &[Complex64], a: &SensingMatrix, support: &[usize]) -> Result<Fit, ImagingError> {
    if y.len() != a.nrows() {
        return Err(ImagingError::ShapeMismatch {
            what: "measurement",
            expected: a.nrows(),
            got: y.len(),
        });
    }
    if support.is_empty() {
        return Ok(Fit {
            coefficients: Vec::new(),
            residual: y.to_vec(),
        });
    }
    let a_s = a.columns(support)?;
    let k = support.len();
    if k > a_s.nrows() {
        return Err(ImagingError::RankDeficient {
            support_len: k,
            condition: f64::INFINITY,
        });
    }
    let qr = a_s.clone().qr();
    let r: DMatrix<Complex64> = qr.r();
    let condition = condition_number(&r);
    if !(condition <= MAX_LS_CONDITION) {
        return Err(ImagingError::RankDeficient {
            support_len: k,
            condition,
        });
    }
    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let c = r
        .solve_upper_triangular(&qty.rows(0, k).into_owned())
        .ok_or(ImagingError::RankDeficient {
            support_len: k,
            condition,
        })?;
    let fitted = &a_s * &c;
    let residual = y.iter().zip(fitted.iter()).map(|(u, v)| u - v).collect();
    Ok(Fit {
        coefficients: c.iter().copied().collect(),
        residual,
    })
}

/// Least-squares coefficients `argmin_c ‖y − A_S c‖₂` via Householder QR.
pub fn ls_on_support(
    y: &[Complex64],
    a: &SensingMatrix,
    support: &[usize],
) -> Result<Vec<Complex64>, ImagingError> {
    fit(y, a, support).map(|f| f.coefficients)
}

/// `y − A_S · ls_on_support(y, A, S)`.
pub fn residual(y: &[Complex64], a: &SensingMatrix, support: &[usize]) -> Result<Vec<Complex64>, ImagingError> {
    fit(y, a, support).map(|f| f.residual)
}

/// Subspace pursuit parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpOptions {
    /// Prior sparsity K°.
    pub k_prior: usize,
    /// Residual-norm stopping threshold ε.
    pub epsilon: f64,
    pub max_iter: usize,
}

impl SpOptions {
    pub const DEFAULT_K_PRIOR: usize = 5;
    pub const DEFAULT_MAX_ITER: usize = 50;

    /// ε = √(2·rows)·σ_z, floored at the smallest positive float for
    /// noiseless data.
    pub fn noise_threshold(rows: usize, noise_std: f64) -> f64 {
        (libm::sqrt(2.0 * rows as f64) * noise_std).max(f64::MIN_POSITIVE)
    }

    pub fn new(k_prior: usize, rows: usize, noise_std: f64) -> Self {
        Self {
            k_prior,
            epsilon: Self::noise_threshold(rows, noise_std),
            max_iter: Self::DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// ‖y_res‖₂ ≤ ε.
    ResidualBelowThreshold,
    /// The renewed support equals the previous one.
    SupportStable,
    /// The renewed support fit worse than the previous one; the previous
    /// support is kept.
    ResidualIncreased,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpResult {
    pub estimate: ImageEstimate,
    /// Final support, ascending.
    pub support: Vec<usize>,
    /// LS coefficients aligned with `support`.
    pub coefficients: Vec<Complex64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
    /// Residual norm after initialization and after each accepted iteration.
    pub residual_trace: Vec<f64>,
}

impl SpResult {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::MaxIterations
    }
}

/// Subspace pursuit with prior sparsity K°.
///
/// Starts from the K° strongest matched-filter voxels. Each iteration merges
/// the K° voxels best correlated with the residual into the support, refits by
/// least squares on the merged set, keeps the K° largest refit magnitudes and
/// recomputes the residual. Stops when the residual norm falls to ε, when the
/// support no longer changes, when a renewal would increase the residual, or
/// after `max_iter` iterations.
pub fn subspace_pursuit(y: &[Complex64], a: &SensingMatrix, opts: &SpOptions) -> Result<SpResult, ImagingError> {
    if y.len() != a.nrows() {
        return Err(ImagingError::ShapeMismatch {
            what: "measurement",
            expected: a.nrows(),
            got: y.len(),
        });
    }
    let k = opts.k_prior;
    if k == 0 || k > a.ncols() {
        return Err(ImagingError::InvalidSparsity { k, len: a.ncols() });
    }
    if !(opts.epsilon.is_finite() && opts.epsilon > 0.0) {
        return Err(ImagingError::InvalidThreshold(opts.epsilon));
    }

    let mut support = select_top_k(&a.adjoint(y), k)?;
    let mut current = fit(y, a, &support)?;
    let mut res_norm = norm(&current.residual);
    let mut trace = alloc::vec![res_norm];
    let mut iterations = 0;

    let stop = loop {
        if res_norm <= opts.epsilon {
            break StopReason::ResidualBelowThreshold;
        }
        if iterations == opts.max_iter {
            break StopReason::MaxIterations;
        }
        iterations += 1;

        let candidates = select_top_k(&a.adjoint(&current.residual), k)?;
        let mut merged = support.clone();
        merged.extend(candidates);
        merged.sort_unstable();
        merged.dedup();

        let refit = fit(y, a, &merged)?;
        let keep = select_top_k(&refit.coefficients, k)?;
        let renewed: Vec<usize> = keep.iter().map(|&i| merged[i]).collect();

        if renewed == support {
            break StopReason::SupportStable;
        }
        let next = fit(y, a, &renewed)?;
        let next_norm = norm(&next.residual);
        if next_norm > res_norm {
            break StopReason::ResidualIncreased;
        }
        support = renewed;
        current = next;
        res_norm = next_norm;
        trace.push(res_norm);
    };

    let mut sigma_hat = alloc::vec![Complex64::new(0.0, 0.0); a.ncols()];
    for (&v, &c) in support.iter().zip(&current.coefficients) {
        sigma_hat[v] = c;
    }
    Ok(SpResult {
        estimate: ImageEstimate { sigma_hat },
        support,
        coefficients: current.coefficients,
        residual_norm: res_norm,
        iterations,
        stop,
        residual_trace: trace,
    })
}

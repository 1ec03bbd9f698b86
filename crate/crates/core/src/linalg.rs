use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// 2-norm condition number from the singular values; infinite when singular.
pub(crate) fn condition_number(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Circularly-symmetric complex Gaussian sample with variance `variance`.
pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = libm::sqrt(variance / 2.0);
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * scale, im * scale)
}

pub(crate) fn random_gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(n, n, |_, _| complex_gaussian(rng, 1.0))
}

pub(crate) fn norm(v: &[Complex64]) -> f64 {
    libm::sqrt(v.iter().map(|z| z.norm_sqr()).sum())
}

//! Image-quality and detection metrics on magnitude images.

use alloc::vec::Vec;

/// Default detection threshold: half the mean scattering coefficient √0.01.
pub const DEFAULT_THRESHOLD: f64 = 0.05;
/// Default SSIM dynamic range.
pub const DEFAULT_SSIM_RANGE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub mse: f64,
    pub ssim: f64,
    pub dr: f64,
    pub fdr: f64,
    pub n_truth_targets: usize,
    pub n_pred_targets: usize,
    pub threshold: f64,
}

/// Evaluates all four metrics with the default SSIM range.
pub fn evaluate(pred: &[f64], truth: &[f64], threshold: f64) -> MetricsRecord {
    let (dr, fdr) = dr_fdr(pred, truth, threshold);
    MetricsRecord {
        mse: mse(pred, truth),
        ssim: ssim(pred, truth),
        dr,
        fdr,
        n_truth_targets: support(truth).len(),
        n_pred_targets: detect(pred, threshold).len(),
        threshold,
    }
}

/// `‖pred − truth‖² / n`.
pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "image sizes differ");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Global (single-window) SSIM with `c1 = (0.01·L)²`, `c2 = (0.03·L)²`,
/// `L = 0.2`.
pub fn ssim(pred: &[f64], truth: &[f64]) -> f64 {
    let l = DEFAULT_SSIM_RANGE;
    ssim_with_constants(pred, truth, (0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l))
}

/// Global SSIM with explicit stabilizing constants. Means, variances and the
/// covariance are population moments over all pixels.
pub fn ssim_with_constants(pred: &[f64], truth: &[f64], c1: f64, c2: f64) -> f64 {
    assert_eq!(pred.len(), truth.len(), "image sizes differ");
    let n = pred.len() as f64;
    let mu_p = pred.iter().sum::<f64>() / n;
    let mu_t = truth.iter().sum::<f64>() / n;
    let (mut var_p, mut var_t, mut cov) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let dp = p - mu_p;
        let dt = t - mu_t;
        var_p += dp * dp;
        var_t += dt * dt;
        cov += dp * dt;
    }
    var_p /= n;
    var_t /= n;
    cov /= n;
    ((2.0 * mu_t * mu_p + c1) * (2.0 * cov + c2)) / ((mu_t * mu_t + mu_p * mu_p + c1) * (var_t + var_p + c2))
}

/// Indices with `|pred| > threshold`, ascending.
pub fn detect(pred: &[f64], threshold: f64) -> Vec<usize> {
    pred.iter()
        .enumerate()
        .filter(|(_, p)| p.abs() > threshold)
        .map(|(i, _)| i)
        .collect()
}

fn support(truth: &[f64]) -> Vec<usize> {
    truth
        .iter()
        .enumerate()
        .filter(|(_, t)| **t != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Detection rate and false detection rate from voxel support sets.
///
/// An empty truth with an empty detection counts as DR 1; an empty detection
/// has FDR 0.
pub fn dr_fdr(pred: &[f64], truth: &[f64], threshold: f64) -> (f64, f64) {
    assert_eq!(pred.len(), truth.len(), "image sizes differ");
    dr_fdr_sets(&detect(pred, threshold), &support(truth))
}

/// [`dr_fdr`] on explicit ascending index sets.
pub fn dr_fdr_sets(detected: &[usize], truth: &[usize]) -> (f64, f64) {
    let hits = detected.iter().filter(|d| truth.binary_search(d).is_ok()).count();
    let dr = if truth.is_empty() {
        if detected.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        hits as f64 / truth.len() as f64
    };
    let fdr = if detected.is_empty() {
        0.0
    } else {
        (detected.len() - hits) as f64 / detected.len() as f64
    };
    (dr, fdr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::vec;

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[0.1, 0.0], &[0.1, 0.0]), 0.0);
        assert!((mse(&[0.0, 0.0], &[0.1, 0.0]) - 0.005).abs() < 1e-15);
        let a = [0.3, 0.1, 0.0];
        let b = [0.1, 0.0, 0.2];
        let scaled_a: Vec<f64> = a.iter().map(|x| x * 3.0).collect();
        let scaled_b: Vec<f64> = b.iter().map(|x| x * 3.0).collect();
        assert!((mse(&scaled_a, &scaled_b) - 9.0 * mse(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn ssim_identity_and_dissimilarity() {
        let x = [0.0, 0.1, 0.0, 0.15];
        assert!((ssim(&x, &x) - 1.0).abs() < 1e-15);
        let s = ssim(&[0.0; 4], &x);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn ssim_matches_hand_arithmetic() {
        // truth = [0.1, 0, 0, 0.2], pred = [0.05, 0.01, 0, 0.1]
        // μt = 0.075, μp = 0.04
        // θt² = (0.025² + 0.075² + 0.075² + 0.125²)/4 = 0.006875
        // θp² = (0.01² + 0.03² + 0.04² + 0.06²)/4 = 0.00155
        // θtp = (0.025·0.01 + 0.075·0.03 + 0.075·0.04 + 0.125·0.06)/4 = 0.00325
        let truth = [0.1, 0.0, 0.0, 0.2];
        let pred = [0.05, 0.01, 0.0, 0.1];
        let (c1, c2) = (4e-6, 3.6e-5);
        let expected = ((2.0 * 0.075 * 0.04 + c1) * (2.0 * 0.00325 + c2))
            / ((0.075f64.powi(2) + 0.04f64.powi(2) + c1) * (0.006875 + 0.00155 + c2));
        assert!((ssim(&pred, &truth) - expected).abs() < 1e-12);
    }

    #[test]
    fn detection_cases() {
        assert!(detect(&[0.0; 5], 0.05).is_empty());
        assert_eq!(detect(&[0.0, 0.1, 0.0], 0.05), vec![1]);
        let pred = [0.01, 0.2, 0.07, 0.5, 0.03, 0.09];
        let mut last = usize::MAX;
        for step in 0..60 {
            let n = detect(&pred, step as f64 * 0.01).len();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn dr_fdr_cases() {
        let truth = [0.0, 0.1, 0.0, 0.2];
        assert_eq!(dr_fdr(&truth, &truth, 0.05), (1.0, 0.0));
        assert_eq!(dr_fdr(&[0.0; 4], &truth, 0.05), (0.0, 0.0));
        assert_eq!(dr_fdr_sets(&[3, 7], &[3]), (1.0, 0.5));
        assert_eq!(dr_fdr_sets(&[], &[]), (1.0, 0.0));
    }

    proptest! {
        #[test]
        fn ssim_symmetric(a in prop::collection::vec(0.0f64..0.3, 16), b in prop::collection::vec(0.0f64..0.3, 16)) {
            prop_assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-14);
            prop_assert!(mse(&a, &b) >= 0.0);
            prop_assert_eq!(mse(&a, &b) == 0.0, a == b);
        }

        #[test]
        fn ssim_scale_invariant_without_constants(a in prop::collection::vec(0.0f64..0.3, 16), b in prop::collection::vec(0.0f64..0.3, 16), c in 0.1f64..10.0) {
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            let base = ssim_with_constants(&a, &b, 0.0, 0.0);
            prop_assume!(base.is_finite());
            prop_assert!((ssim_with_constants(&sa, &sb, 0.0, 0.0) - base).abs() < 1e-9);
        }

        #[test]
        fn dr_fdr_ignore_values_above_threshold(mask in prop::collection::vec(any::<bool>(), 12), t in prop::collection::vec(any::<bool>(), 12), bump in 0.06f64..2.0) {
            let truth: Vec<f64> = t.iter().map(|&x| if x { 0.1 } else { 0.0 }).collect();
            let p1: Vec<f64> = mask.iter().map(|&x| if x { 0.06 } else { 0.0 }).collect();
            let p2: Vec<f64> = mask.iter().map(|&x| if x { bump } else { 0.01 }).collect();
            prop_assert_eq!(dr_fdr(&p1, &truth, 0.05), dr_fdr(&p2, &truth, 0.05));
            let (dr, fdr) = dr_fdr(&p1, &truth, 0.05);
            prop_assert!((0.0..=1.0).contains(&dr) && (0.0..=1.0).contains(&fdr));
        }
    }
}

//! Local observations: the `m + 2` features a device conditions on, and the
//! running normalization statistics shared across training.
//!
//! Feature layout is `[lambda_bar, prev_action, sr_0, .., sr_{m-1}]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::DeviceOutcome;

/// Guard added to the variance before taking the square root.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ObsError {
    #[error("running statistics are frozen")]
    Frozen,
    #[error("feature width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("invalid frozen statistics: {0}")]
    InvalidStats(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    /// Step size of the incremental estimators.
    pub alpha: f64,
    pub m: usize,
    /// Starting value of every per-resource success estimate.
    pub success_init: f64,
}

impl ObsConfig {
    pub fn new(m: usize) -> Self {
        Self {
            alpha: 0.001,
            m,
            success_init: 1.0,
        }
    }

    pub fn width(&self) -> usize {
        self.m + 2
    }
}

/// `lambda_bar + alpha * (x - lambda_bar)`.
#[inline]
pub fn update_rate_estimate(lambda_bar: f64, x: f64, alpha: f64) -> f64 {
    lambda_bar + alpha * (x - lambda_bar)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalObservation {
    pub lambda_bar: f64,
    pub prev_action: usize,
    pub success_rates: Vec<f64>,
}

impl LocalObservation {
    pub fn new(cfg: &ObsConfig) -> Self {
        Self {
            lambda_bar: 0.0,
            prev_action: 0,
            success_rates: vec![cfg.success_init; cfg.m],
        }
    }

    pub fn width(&self) -> usize {
        self.success_rates.len() + 2
    }

    pub fn write_features(&self, out: &mut [f64]) {
        out[0] = self.lambda_bar;
        out[1] = self.prev_action as f64;
        out[2..2 + self.success_rates.len()].copy_from_slice(&self.success_rates);
    }

    pub fn features(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        self.write_features(&mut v);
        v
    }

    /// Folds one transmission result into the estimate for `resource` only.
    pub fn update_success_estimate(&mut self, resource: usize, success: bool, alpha: f64) {
        let x = if success { 1.0 } else { 0.0 };
        let sr = &mut self.success_rates[resource];
        *sr = update_rate_estimate(*sr, x, alpha);
    }

    /// Per-slot update after the MAC resolved the slot.
    pub fn observe_slot(&mut self, arrivals: u8, outcome: &DeviceOutcome, alpha: f64) {
        self.lambda_bar = update_rate_estimate(self.lambda_bar, f64::from(arrivals), alpha);
        match *outcome {
            DeviceOutcome::Success { resource, .. } => self.update_success_estimate(resource, true, alpha),
            DeviceOutcome::Collision { resource, .. } => self.update_success_estimate(resource, false, alpha),
            _ => {}
        }
    }
}

/// Per-feature Welford accumulator. Once frozen it only normalizes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    frozen_variance: Option<Vec<f64>>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
            frozen_variance: None,
        }
    }

    /// Rebuilds frozen statistics, e.g. from a checkpoint.
    pub fn from_frozen(count: u64, means: Vec<f64>, variances: Vec<f64>) -> Result<Self, ObsError> {
        if means.len() != variances.len() {
            return Err(ObsError::WidthMismatch {
                expected: means.len(),
                actual: variances.len(),
            });
        }
        if variances.iter().any(|v| *v < 0.0 || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(ObsError::InvalidStats(
                "means must be finite and variances non-negative".into(),
            ));
        }
        let m2 = variances.iter().map(|v| v * count.saturating_sub(1) as f64).collect();
        Ok(Self {
            count,
            mean: means,
            m2,
            frozen_variance: Some(variances),
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_variance.is_some()
    }

    /// Unbiased sample variance per feature; zero below two samples.
    pub fn variance(&self) -> Vec<f64> {
        if let Some(v) = &self.frozen_variance {
            return v.clone();
        }
        if self.count < 2 {
            return vec![0.0; self.width()];
        }
        let denom = (self.count - 1) as f64;
        self.m2.iter().map(|m2| m2 / denom).collect()
    }

    pub fn update(&mut self, x: &[f64]) -> Result<(), ObsError> {
        if self.is_frozen() {
            return Err(ObsError::Frozen);
        }
        if x.len() != self.width() {
            return Err(ObsError::WidthMismatch {
                expected: self.width(),
                actual: x.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), &xi) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = xi - *mean;
            *mean += delta / n;
            *m2 += delta * (xi - *mean);
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        if !self.is_frozen() {
            self.frozen_variance = Some(self.variance());
        }
    }

    /// `(x - mean) / sqrt(var + eps)`, or `x` unchanged with fewer than two samples.
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        if self.count < 2 {
            out.copy_from_slice(x);
            return;
        }
        let var = self.variance();
        for (((o, &xi), &mean), &v) in out.iter_mut().zip(x).zip(&self.mean).zip(&var) {
            *o = (xi - mean) / (v + NORM_EPS).sqrt();
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rate_estimate_examples() {
        assert_eq!(update_rate_estimate(0.0, 1.0, 0.001), 0.001);
        assert!((update_rate_estimate(0.1, 3.0, 0.001) - 0.1029).abs() < 1e-15);
        let mut l = 0.5;
        for _ in 0..1000 {
            l = update_rate_estimate(l, 0.5, 0.001);
        }
        assert_eq!(l, 0.5);
    }

    #[test]
    fn success_estimate_examples() {
        let cfg = ObsConfig {
            success_init: 0.5,
            ..ObsConfig::new(2)
        };
        let mut o = LocalObservation::new(&cfg);
        o.update_success_estimate(0, true, 0.001);
        assert!((o.success_rates[0] - 0.5005).abs() < 1e-15);
        assert_eq!(o.success_rates[1], 0.5);
        let mut o = LocalObservation::new(&cfg);
        o.update_success_estimate(0, false, 0.001);
        assert!((o.success_rates[0] - 0.4995).abs() < 1e-15);

        let mut prev = o.success_rates[0];
        for _ in 0..5000 {
            o.update_success_estimate(0, true, 0.001);
            assert!(o.success_rates[0] > prev && o.success_rates[0] <= 1.0);
            prev = o.success_rates[0];
        }
    }

    #[test]
    fn features_have_m_plus_two_entries() {
        let o = LocalObservation::new(&ObsConfig::new(4));
        assert_eq!(o.features().len(), 6);
    }

    #[test]
    fn welford_closed_forms() {
        let mut s = RunningStats::new(1);
        for x in [1.0, 2.0, 3.0] {
            s.update(&[x]).unwrap();
        }
        assert_eq!(s.mean(), &[2.0]);
        assert_eq!(s.variance(), vec![1.0]);

        let mut one = RunningStats::new(1);
        one.update(&[4.2]).unwrap();
        assert_eq!(one.variance(), vec![0.0]);
    }

    #[test]
    fn welford_matches_two_pass() {
        let mut rng = crate::seeded_rng(11, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| 1e3 + rng.gen::<f64>() * 5.0).collect();
        let mut s = RunningStats::new(1);
        for &x in &xs {
            s.update(&[x]).unwrap();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(((s.mean()[0] - mean) / mean).abs() < 1e-10);
        assert!(((s.variance()[0] - var) / var).abs() < 1e-10);
    }

    #[test]
    fn frozen_rejects_updates_and_is_stable() {
        let mut s = RunningStats::new(2);
        s.update(&[1.0, 5.0]).unwrap();
        s.update(&[3.0, 5.0]).unwrap();
        s.freeze();
        assert_eq!(s.update(&[0.0, 0.0]), Err(ObsError::Frozen));
        let a = s.normalize(&[2.0, 7.0]);
        let b = s.normalize(&[2.0, 7.0]);
        assert_eq!(a, b);
        assert_eq!(s.normalize(&[2.0, 5.0]), vec![0.0, 0.0]);
        // Zero-variance feature stays bounded thanks to the stabilizer.
        assert!(a[1].is_finite());
    }

    #[test]
    fn normalize_passes_through_before_two_samples() {
        let mut s = RunningStats::new(2);
        assert_eq!(s.normalize(&[3.0, 4.0]), vec![3.0, 4.0]);
        s.update(&[1.0, 1.0]).unwrap();
        assert_eq!(s.normalize(&[3.0, 4.0]), vec![3.0, 4.0]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut s = RunningStats::new(3);
        assert_eq!(
            s.update(&[1.0]),
            Err(ObsError::WidthMismatch { expected: 3, actual: 1 })
        );
    }

    #[test]
    fn from_frozen_round_trip() {
        let s = RunningStats::from_frozen(10, vec![1.0, 2.0], vec![0.5, 0.0]).unwrap();
        assert!(s.is_frozen());
        assert_eq!(s.variance(), vec![0.5, 0.0]);
        assert!(RunningStats::from_frozen(3, vec![1.0], vec![-1.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rate_update_is_convex(old in 0.0f64..10.0, x in 0.0f64..10.0, alpha in 0.0001f64..0.9999) {
            let new = update_rate_estimate(old, x, alpha);
            proptest::prop_assert!(new >= old.min(x) - 1e-12 && new <= old.max(x) + 1e-12);
        }
    }
}

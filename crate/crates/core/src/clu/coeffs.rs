//! Per-sample adaptive coefficients and the balanced saliency mask.

use serde::{Deserialize, Serialize};

use crate::error::{CluError, Result};

pub const DEFAULT_LOSS_FLOOR: f64 = 1e-8;
pub const DEFAULT_SALIENCY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSchedule {
    pub lambda_learn: f64,
    pub lambda_unlearn: f64,
    #[serde(default = "default_loss_floor")]
    pub loss_floor: f64,
}

fn default_loss_floor() -> f64 {
    DEFAULT_LOSS_FLOOR
}

impl Default for CoefficientSchedule {
    fn default() -> Self {
        Self {
            lambda_learn: 1.0,
            lambda_unlearn: 1.0,
            loss_floor: DEFAULT_LOSS_FLOOR,
        }
    }
}

impl CoefficientSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_learn.is_finite()
            && self.lambda_unlearn.is_finite()
            && self.lambda_learn >= 0.0
            && self.lambda_unlearn >= 0.0
            && self.loss_floor > 0.0
            && self.loss_floor.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CluError::Config("coefficient schedule needs finite lambdas >= 0 and a positive loss floor".into()))
        }
    }
}

/// `N * (1/l_i^λ) / Σ_j (1/l_j^λ)`, losses floored.
fn inverse_loss_shares(losses: &[f64], lambda: f64, floor: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(CluError::validation("coefficients need at least one loss"));
    }
    if losses.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(CluError::validation("losses must be finite and nonnegative"));
    }
    // work in log space so λ·ln(l) cannot overflow
    let logs: Vec<f64> = losses.iter().map(|&l| -lambda * l.max(floor).ln()).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let n = losses.len() as f64;
    Ok(raw.into_iter().map(|r| n * r / sum).collect())
}

fn check_step(k: usize, total: usize) -> Result<f64> {
    if total == 0 || k > total {
        return Err(CluError::validation(format!("iteration {k} outside 0..={total}")));
    }
    Ok(k as f64 / total as f64)
}

/// Learning coefficients: ramp `k/K` times inverse-loss shares, capped at 1.
pub fn adaptive_coeffs_learn(losses: &[f64], k: usize, total: usize, sched: &CoefficientSchedule) -> Result<Vec<f64>> {
    let ramp = check_step(k, total)?;
    let shares = inverse_loss_shares(losses, sched.lambda_learn, sched.loss_floor)?;
    Ok(shares.into_iter().map(|s| (ramp * s).min(1.0)).collect())
}

/// Unlearning coefficients: ramp `1 - k/K` times inverse-loss shares, uncapped.
pub fn adaptive_coeffs_unlearn(losses: &[f64], k: usize, total: usize, sched: &CoefficientSchedule) -> Result<Vec<f64>> {
    let ramp = 1.0 - check_step(k, total)?;
    let shares = inverse_loss_shares(losses, sched.lambda_unlearn, sched.loss_floor)?;
    Ok(shares.into_iter().map(|s| ramp * s).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub gamma: f64,
    #[serde(default = "default_saliency_floor")]
    pub floor: f64,
}

fn default_saliency_floor() -> f64 {
    DEFAULT_SALIENCY_FLOOR
}

impl SaliencyConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            floor: DEFAULT_SALIENCY_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_finite() && self.gamma > 0.0 && self.floor > 0.0 {
            Ok(())
        } else {
            Err(CluError::Config("saliency gamma must be finite and positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    bits: Vec<bool>,
}

impl SaliencyMask {
    pub fn full(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|b| **b).count() as f64 / self.bits.len() as f64
    }
}

/// Keeps coordinates whose task-gradient magnitude is at least `gamma` times
/// the reference remaining-gradient magnitude.
pub fn saliency_mask(grad_task_abs: &[f64], grad_remain0_abs: &[f64], cfg: &SaliencyConfig) -> Result<SaliencyMask> {
    if grad_task_abs.len() != grad_remain0_abs.len() {
        return Err(CluError::shape(format!(
            "mask inputs have lengths {} and {}",
            grad_task_abs.len(),
            grad_remain0_abs.len()
        )));
    }
    let bits = grad_task_abs
        .iter()
        .zip(grad_remain0_abs)
        .map(|(&q, &r)| q / r.max(cfg.floor) >= cfg.gamma)
        .collect();
    Ok(SaliencyMask { bits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(lambda: f64) -> CoefficientSchedule {
        CoefficientSchedule {
            lambda_learn: lambda,
            lambda_unlearn: lambda,
            loss_floor: DEFAULT_LOSS_FLOOR,
        }
    }

    #[test]
    fn learn_starts_at_zero() {
        let c = adaptive_coeffs_learn(&[0.3, 1.2, 4.0], 0, 10, &sched(1.0)).unwrap();
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn unlearn_ends_at_zero() {
        let c = adaptive_coeffs_unlearn(&[0.3, 1.2, 4.0], 10, 10, &sched(1.0)).unwrap();
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn equal_losses_collapse_to_the_ramp() {
        for lambda in [0.0, 0.5, 1.0, 3.0] {
            let l = adaptive_coeffs_learn(&[0.7; 4], 3, 10, &sched(lambda)).unwrap();
            assert_eq!(l, vec![0.3; 4]);
            let u = adaptive_coeffs_unlearn(&[0.7; 4], 3, 10, &sched(lambda)).unwrap();
            assert_eq!(u, vec![1.0 - 0.3; 4]);
        }
    }

    #[test]
    fn learn_hand_vector() {
        let c = adaptive_coeffs_learn(&[1.0, 2.0], 5, 5, &sched(1.0)).unwrap();
        assert_eq!(c[0], 1.0);
        assert!((c[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unlearn_hand_vector() {
        let c = adaptive_coeffs_unlearn(&[1.0, 3.0], 0, 5, &sched(1.0)).unwrap();
        assert!((c[0] - 1.5).abs() < 1e-15);
        assert!((c[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn larger_loss_gets_smaller_coefficient() {
        let losses = [0.1, 0.5, 2.0, 9.0];
        let c = adaptive_coeffs_unlearn(&losses, 1, 4, &sched(0.8)).unwrap();
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_loss_is_floored() {
        let c = adaptive_coeffs_unlearn(&[0.0, 1.0], 0, 1, &sched(1.0)).unwrap();
        assert!(c.iter().all(|v| v.is_finite()));
        assert!((c[0] + c[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(adaptive_coeffs_learn(&[], 0, 1, &sched(1.0)).is_err());
        assert!(adaptive_coeffs_learn(&[1.0], 2, 1, &sched(1.0)).is_err());
        assert!(adaptive_coeffs_unlearn(&[-1.0], 0, 1, &sched(1.0)).is_err());
    }

    #[test]
    fn mask_examples() {
        let g = [0.3, 1.5, 2.0];
        assert_eq!(saliency_mask(&g, &g, &SaliencyConfig::new(1.0)).unwrap().bits(), &[true; 3]);
        let r = [1.0, 2.0];
        let q = [2.0, 1.0];
        assert_eq!(
            saliency_mask(&q, &r, &SaliencyConfig::new(1.0)).unwrap().bits(),
            &[true, false]
        );
        let tiny = SaliencyConfig::new(f64::MIN_POSITIVE);
        assert_eq!(saliency_mask(&[1e-300, 1e-9], &[5.0, 3.0], &tiny).unwrap().density(), 1.0);
        assert!(saliency_mask(&[1.0], &[1.0, 2.0], &SaliencyConfig::new(1.0)).is_err());
    }

    #[test]
    fn mask_is_scale_invariant() {
        let q = [0.3, 1.7, 0.02, 5.0, 0.9];
        let r = [0.5, 0.4, 0.03, 8.0, 0.9];
        let cfg = SaliencyConfig::new(1.3);
        let base = saliency_mask(&q, &r, &cfg).unwrap();
        for k in [0.5, 4.0, 1024.0] {
            let qs: Vec<f64> = q.iter().map(|v| v * k).collect();
            let rs: Vec<f64> = r.iter().map(|v| v * k).collect();
            assert_eq!(saliency_mask(&qs, &rs, &cfg).unwrap(), base);
        }
    }
}

//! Prediction-based membership inference: modified prediction entropy fed to
//! a logistic-regression attacker trained on remain (member) versus test
//! (non-member) samples.

use serde::{Deserialize, Serialize};

use crate::data::{batch_of, Sample};
use crate::error::{CluError, Result};
use crate::model::{forward_probs, ModelSpec, ParamVector, PROB_FLOOR};

/// `-(1 - p_y) ln p_y - Σ_{i≠y} p_i ln(1 - p_i)`.
pub fn modified_entropy(probs: &[f64], label: usize) -> f64 {
    let mut h = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if i == label {
            h -= (1.0 - p) * p.max(PROB_FLOOR).ln();
        } else {
            h -= p * (1.0 - p).max(PROB_FLOOR).ln();
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFeatures {
    #[default]
    Entropy,
    EntropyMaxProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub features: AttackFeatures,
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            features: AttackFeatures::Entropy,
            l2: 1e-3,
            lr: 0.5,
            iterations: 500,
        }
    }
}

fn features(probs: &[Vec<f64>], labels: &[usize], kind: AttackFeatures) -> Vec<Vec<f64>> {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let h = modified_entropy(p, y);
            match kind {
                AttackFeatures::Entropy => vec![h],
                AttackFeatures::EntropyMaxProb => vec![h, p.iter().cloned().fold(0.0, f64::max)],
            }
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized, class-balanced logistic regression on standardized
/// features, fit by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticAttack {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticAttack {
    pub fn fit(members: &[Vec<f64>], non_members: &[Vec<f64>], cfg: &AttackConfig) -> Result<Self> {
        if members.is_empty() || non_members.is_empty() {
            return Err(CluError::validation("attack training needs both member and non-member samples"));
        }
        let d = members[0].len();
        let all: Vec<&Vec<f64>> = members.iter().chain(non_members).collect();
        if all.iter().any(|x| x.len() != d) {
            return Err(CluError::shape("attack features differ in length"));
        }
        let n = all.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| all.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = all.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let z = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect() };
        let data: Vec<(Vec<f64>, f64, f64)> = {
            let wp = n / (2.0 * members.len() as f64);
            let wn = n / (2.0 * non_members.len() as f64);
            members
                .iter()
                .map(|x| (z(x), 1.0, wp))
                .chain(non_members.iter().map(|x| (z(x), 0.0, wn)))
                .collect()
        };
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, y, cw) in &data {
                let s: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let r = cw * (sigmoid(s) - y);
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += r * v;
                }
                gb += r;
            }
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= cfg.lr * (g / n + cfg.l2 * *wj);
            }
            b -= cfg.lr * gb / n;
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        let s: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), sc), w)| w * (v - m) / sc)
            .sum::<f64>()
            + self.bias;
        sigmoid(s)
    }

    pub fn is_member(&self, x: &[f64]) -> bool {
        self.probability(x) > 0.5
    }
}

fn attack_inputs(spec: &ModelSpec, params: &ParamVector, samples: &[Sample], kind: AttackFeatures) -> Result<Vec<Vec<f64>>> {
    let batch = batch_of(samples)?;
    let probs = forward_probs(spec, params, &batch)?;
    Ok(features(&probs, batch.labels(), kind))
}

/// Fraction of the forget set the attacker labels as training members.
pub fn mia_score(
    spec: &ModelSpec,
    params: &ParamVector,
    remain: &[Sample],
    test: &[Sample],
    forget: &[Sample],
    cfg: &AttackConfig,
) -> Result<f64> {
    if remain.is_empty() || test.is_empty() || forget.is_empty() {
        return Err(CluError::validation("membership inference needs nonempty remain, test and forget sets"));
    }
    let members = attack_inputs(spec, params, remain, cfg.features)?;
    let outsiders = attack_inputs(spec, params, test, cfg.features)?;
    let attack = LogisticAttack::fit(&members, &outsiders, cfg)?;
    let targets = attack_inputs(spec, params, forget, cfg.features)?;
    let hits = targets.iter().filter(|x| attack.is_member(x)).count();
    Ok(hits as f64 / forget.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_has_zero_entropy() {
        assert_eq!(modified_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
    }

    #[test]
    fn wrong_confident_prediction_has_large_entropy() {
        let h = modified_entropy(&[1.0, 0.0], 1);
        assert!(h > 20.0);
    }

    #[test]
    fn hand_entropy() {
        let p = [0.7, 0.2, 0.1];
        let expect = -(0.3 * 0.7f64.ln()) - 0.2 * 0.8f64.ln() - 0.1 * 0.9f64.ln();
        assert!((modified_entropy(&p, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn attack_separates_shifted_features() {
        let members: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.01]).collect();
        let outsiders: Vec<Vec<f64>> = (0..50).map(|i| vec![2.0 + i as f64 * 0.01]).collect();
        let a = LogisticAttack::fit(&members, &outsiders, &AttackConfig::default()).unwrap();
        assert!(members.iter().all(|x| a.is_member(x)));
        assert!(outsiders.iter().all(|x| !a.is_member(x)));
    }

    #[test]
    fn constant_features_give_an_uninformed_attacker() {
        let members = vec![vec![0.3]; 10];
        let outsiders = vec![vec![0.3]; 30];
        let a = LogisticAttack::fit(&members, &outsiders, &AttackConfig::default()).unwrap();
        assert!((a.probability(&[0.3]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_class_attack_data_is_rejected() {
        assert!(LogisticAttack::fit(&[vec![1.0]], &[], &AttackConfig::default()).is_err());
    }
}

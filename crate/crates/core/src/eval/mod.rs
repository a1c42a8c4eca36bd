//! Continual learning-unlearning metrics.

mod mia;

pub use mia::{mia_score, modified_entropy, AttackConfig, AttackFeatures, LogisticAttack};

use serde::{Deserialize, Serialize};

use crate::data::{batch_of, Sample};
use crate::error::{CluError, Result};
use crate::model::{forward_probs, predict, ModelSpec, ParamVector, PROB_FLOOR};

/// Lower-triangular accuracy grid: `rows[i][j]` is the accuracy on the
/// classes of learn task `j` after learn task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() > i + 1 {
                return Err(CluError::shape(format!("row {i} has {} entries, at most {} allowed", row.len(), i + 1)));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(CluError::validation(format!("row {i} has an accuracy outside [0, 1]")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// CSV with header `after_task,task_0,...`; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("after_task");
        for j in 0..t {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for j in 0..t {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&format!("{a}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of the final row.
pub fn learning_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.tasks();
    if t == 0 {
        return Err(CluError::validation("accuracy matrix is empty"));
    }
    let last = &a.rows[t - 1];
    if last.len() != t {
        return Err(CluError::validation(format!("final row has {} of {t} entries", last.len())));
    }
    Ok(last.iter().sum::<f64>() / t as f64)
}

/// Negated mean drop from the best past accuracy, over all tasks but the last.
pub fn forgetting_measure(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.tasks();
    if t < 2 {
        return Err(CluError::validation("forgetting needs at least two tasks"));
    }
    let last = &a.rows[t - 1];
    if last.len() != t {
        return Err(CluError::validation(format!("final row has {} of {t} entries", last.len())));
    }
    let mut total = 0.0;
    for j in 0..t - 1 {
        let best = a.rows[j..]
            .iter()
            .filter_map(|row| row.get(j))
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - last[j];
    }
    Ok(-(total / (t - 1) as f64))
}

/// Mean over targets of each target's worst-case (highest) accuracy across
/// its post-unlearn checkpoints. `None` when nothing was unlearned.
pub fn unlearning_accuracy(per_target: &[Vec<f64>]) -> Result<Option<f64>> {
    if per_target.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (i, series) in per_target.iter().enumerate() {
        if series.is_empty() {
            return Err(CluError::validation(format!("unlearn target {i} has no checkpoint")));
        }
        sum += series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(Some(sum / per_target.len() as f64))
}

/// Fraction of samples predicted as their stored label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy_against(spec, params, samples, &labels)
}

fn accuracy_against(spec: &ModelSpec, params: &ParamVector, samples: &[Sample], labels: &[usize]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CluError::validation("accuracy of an empty set is undefined"));
    }
    if labels.len() != samples.len() {
        return Err(CluError::shape("label count differs from sample count"));
    }
    let pred = predict(spec, params, &batch_of(samples)?, None)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Accuracy against the pre-shuffle labels of confusion samples.
pub fn clean_accuracy(spec: &ModelSpec, params: &ParamVector, samples: &[Sample], true_labels: &[usize]) -> Result<f64> {
    accuracy_against(spec, params, samples, true_labels)
}

/// `KL(p || q)` with both distributions floored.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CluError::shape(format!("distributions over {} and {} classes", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(PROB_FLOOR);
            a * (a / b.max(PROB_FLOOR)).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Mean sample-wise `KL(p_oracle || p_model)`.
pub fn kl_to_oracle(
    spec: &ModelSpec,
    params: &ParamVector,
    oracle_spec: &ModelSpec,
    oracle_params: &ParamVector,
    samples: &[Sample],
) -> Result<f64> {
    if spec.num_classes != oracle_spec.num_classes {
        return Err(CluError::shape("model and oracle disagree on the class count"));
    }
    if samples.is_empty() {
        return Err(CluError::validation("KL over an empty set is undefined"));
    }
    let batch = batch_of(samples)?;
    let p = forward_probs(oracle_spec, oracle_params, &batch)?;
    let q = forward_probs(spec, params, &batch)?;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(&q) {
        total += kl_divergence(a, b)?;
    }
    Ok(total / samples.len() as f64)
}

/// Final numbers of one run. Optional fields are absent when the protocol
/// does not define them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub la: f64,
    pub fm: Option<f64>,
    pub ua: Option<f64>,
    pub mia: Option<f64>,
    pub ca: Option<f64>,
    pub kl: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: Vec<Vec<f64>>) -> AccuracyMatrix {
        AccuracyMatrix::new(rows).unwrap()
    }

    #[test]
    fn la_examples() {
        assert_eq!(learning_accuracy(&m(vec![vec![1.0], vec![1.0, 1.0]])).unwrap(), 1.0);
        assert!((learning_accuracy(&m(vec![vec![0.95], vec![0.9, 0.8]])).unwrap() - 0.85).abs() < 1e-12);
        let a = m(vec![vec![0.9], vec![0.7, 0.95], vec![0.6, 0.8, 0.97]]);
        assert!((learning_accuracy(&a).unwrap() - (0.6 + 0.8 + 0.97) / 3.0).abs() < 1e-12);
        assert!(learning_accuracy(&m(vec![vec![0.9], vec![0.8]])).is_err());
    }

    #[test]
    fn fm_examples() {
        assert_eq!(forgetting_measure(&m(vec![vec![0.5], vec![0.6, 0.9]])).unwrap(), 0.0);
        let fm = forgetting_measure(&m(vec![vec![0.9], vec![0.8, 0.7]])).unwrap();
        assert!((fm + 0.1).abs() < 1e-12);
        let a = m(vec![vec![0.9], vec![0.7, 0.95], vec![0.6, 0.8, 0.97]]);
        let expect = -((0.9 - 0.6) + (0.95 - 0.8)) / 2.0;
        assert!((forgetting_measure(&a).unwrap() - expect).abs() < 1e-12);
        assert!(forgetting_measure(&m(vec![vec![0.9]])).is_err());
    }

    #[test]
    fn ua_examples() {
        assert_eq!(unlearning_accuracy(&[vec![0.0, 0.0]]).unwrap(), Some(0.0));
        assert_eq!(unlearning_accuracy(&[vec![0.0, 0.2, 0.1]]).unwrap(), Some(0.2));
        let ua = unlearning_accuracy(&[vec![0.0], vec![0.2]]).unwrap().unwrap();
        assert!((ua - 0.1).abs() < 1e-12);
        assert_eq!(unlearning_accuracy(&[]).unwrap(), None);
        assert!(unlearning_accuracy(&[vec![]]).is_err());
    }

    #[test]
    fn ua_grows_with_more_checkpoints() {
        let mut s = vec![0.1];
        let mut prev = unlearning_accuracy(&[s.clone()]).unwrap().unwrap();
        for v in [0.05, 0.3, 0.2] {
            s.push(v);
            let now = unlearning_accuracy(&[s.clone()]).unwrap().unwrap();
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn kl_examples() {
        let p = [0.9, 0.1];
        let q = [0.5, 0.5];
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!(kl_divergence(&q, &p).unwrap() != kl);
        assert!(kl_divergence(&p, &[1.0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = m(vec![vec![0.5], vec![0.25, 1.0]]);
        assert_eq!(a.to_csv(), "after_task,task_0,task_1\n0,0.5,\n1,0.25,1\n");
    }
}

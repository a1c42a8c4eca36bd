//! Reference methods: joint retraining, plain fine-tuning, experience replay,
//! gradient ascent and NegGrad+.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReservoirBuffer;
use crate::clu::{sgd_step, TraceRecord};
use crate::data::{batch_of, Minibatches, Sample};
use crate::error::{CluError, Result};
use crate::eval::accuracy;
use crate::model::{loss_and_weighted_grad, ModelSpec, ParamVector, SampleWeights};
use crate::task::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    UgClu,
    JointRt,
    Ft,
    ErFt,
    Ga,
    #[serde(rename = "neggrad_plus")]
    NegGradPlus,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::UgClu,
        Method::JointRt,
        Method::Ft,
        Method::ErFt,
        Method::Ga,
        Method::NegGradPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::UgClu => "ug_clu",
            Method::JointRt => "joint_rt",
            Method::Ft => "ft",
            Method::ErFt => "er_ft",
            Method::Ga => "ga",
            Method::NegGradPlus => "neggrad_plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CluError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub lr: f64,
    pub unlearn_lr: f64,
    pub neggrad_balance: f64,
    pub batch_size: usize,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0 && self.unlearn_lr.is_finite() && self.unlearn_lr > 0.0) {
            return Err(CluError::Config("baseline learning rates must be finite and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.neggrad_balance) {
            return Err(CluError::Config("neggrad_balance must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(CluError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub min_train_accuracy: f64,
}

/// Trains from scratch on the remaining data. Warns when the final training
/// accuracy stays below `min_train_accuracy`.
pub fn train_joint_oracle<R: Rng + ?Sized>(
    spec: &ModelSpec,
    remaining: &[Sample],
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    if remaining.is_empty() {
        return Err(CluError::validation("remaining set is empty; nothing to train the oracle on"));
    }
    let mut params = spec.init_params(rng);
    let mut cursor = Minibatches::new(remaining.len(), cfg.batch_size)?;
    let steps = cfg.epochs * cursor.batches_per_epoch();
    for _ in 0..steps {
        let batch = batch_of(cursor.next(rng).iter().map(|&i| &remaining[i]))?;
        params = sgd_step(spec, &params, &batch, cfg.lr)?.1;
    }
    let acc = accuracy(spec, &params, remaining)?;
    if acc < cfg.min_train_accuracy {
        log::warn!(
            "oracle train accuracy {acc:.4} is below the threshold {:.4}",
            cfg.min_train_accuracy
        );
    }
    Ok(params)
}

fn record(k: usize, task_loss: Option<f64>, buffer_loss: Option<f64>) -> TraceRecord {
    TraceRecord {
        k,
        task_loss,
        buffer_loss,
        mask_density: 1.0,
        coeff_mean: 1.0,
    }
}

/// Runs `steps` updates of a baseline on one request. `Ga` and `NegGradPlus`
/// only unlearn; `JointRt` is not incremental and is rejected.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline_task<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector,
    method: Method,
    kind: TaskKind,
    task_samples: &[Sample],
    buffer: &mut ReservoirBuffer,
    cfg: &BaselineConfig,
    steps: usize,
    rng: &mut R,
) -> Result<(ParamVector, Vec<TraceRecord>)> {
    cfg.validate()?;
    match (method, kind) {
        (Method::UgClu | Method::JointRt, _) => {
            return Err(CluError::Capability(format!(
                "{} is not a per-task baseline",
                method.name()
            )))
        }
        (Method::Ga | Method::NegGradPlus, TaskKind::Learn) => {
            return Err(CluError::Capability(format!("{} cannot learn", method.name())))
        }
        _ => {}
    }
    let mut theta = params.clone();
    let mut trace = Vec::with_capacity(steps);
    match (method, kind) {
        (Method::Ft, TaskKind::Learn) | (Method::ErFt, TaskKind::Learn) => {
            let mut cursor = Minibatches::new(task_samples.len(), cfg.batch_size)?;
            for k in 0..steps {
                let picked: Vec<Sample> = cursor.next(rng).iter().map(|&i| task_samples[i].clone()).collect();
                let task = batch_of(&picked)?;
                let (losses, mut g) =
                    loss_and_weighted_grad(spec, &theta, &task, &SampleWeights::mean(task.len()))?;
                let mut buffer_loss = None;
                if method == Method::ErFt && !buffer.is_empty() {
                    let replay = buffer.sample_batch(cfg.batch_size)?;
                    let (bl, gb) = loss_and_weighted_grad(spec, &theta, &replay, &SampleWeights::mean(replay.len()))?;
                    g = g.add_scaled(1.0, &gb)?;
                    buffer_loss = Some(bl.iter().sum::<f64>() / bl.len() as f64);
                }
                theta = theta.add_scaled(-cfg.lr, &g)?;
                buffer.offer(&picked)?;
                trace.push(record(k, Some(losses.iter().sum::<f64>() / losses.len() as f64), buffer_loss));
            }
        }
        (Method::Ft, TaskKind::Unlearn) | (Method::ErFt, TaskKind::Unlearn) => {
            if buffer.is_empty() {
                log::warn!("memory buffer is empty; fine-tuning has nothing to replay");
                return Ok((theta, trace));
            }
            for k in 0..steps {
                let replay = buffer.sample_batch(cfg.batch_size)?;
                let (loss, next) = sgd_step(spec, &theta, &replay, cfg.unlearn_lr)?;
                theta = next;
                trace.push(record(k, None, Some(loss)));
            }
        }
        (Method::Ga, TaskKind::Unlearn) | (Method::NegGradPlus, TaskKind::Unlearn) => {
            let b = if method == Method::Ga { 1.0 } else { cfg.neggrad_balance };
            let mut cursor = Minibatches::new(task_samples.len(), cfg.batch_size)?;
            for k in 0..steps {
                let forget = batch_of(cursor.next(rng).iter().map(|&i| &task_samples[i]))?;
                let n = forget.len() as f64;
                let (losses, g_forget) =
                    loss_and_weighted_grad(spec, &theta, &forget, &SampleWeights::uniform(forget.len(), -b / n))?;
                let mut g = g_forget;
                let mut buffer_loss = None;
                if b < 1.0 && !buffer.is_empty() {
                    let replay = buffer.sample_batch(cfg.batch_size)?;
                    let m = replay.len() as f64;
                    let (bl, gr) =
                        loss_and_weighted_grad(spec, &theta, &replay, &SampleWeights::uniform(replay.len(), (1.0 - b) / m))?;
                    g = g.add_scaled(1.0, &gr)?;
                    buffer_loss = Some(bl.iter().sum::<f64>() / m);
                }
                theta = theta.add_scaled(-cfg.unlearn_lr, &g)?;
                trace.push(record(k, Some(losses.iter().sum::<f64>() / n), buffer_loss));
            }
        }
        _ => unreachable!("pairings rejected above"),
    }
    Ok((theta, trace))
}

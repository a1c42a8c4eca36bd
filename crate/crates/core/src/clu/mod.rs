//! Unified-gradient CLU optimizer: adaptive coefficients, saliency masking
//! and the fast-slow update loop.

mod coeffs;

pub use coeffs::{
    adaptive_coeffs_learn, adaptive_coeffs_unlearn, saliency_mask, CoefficientSchedule, SaliencyConfig,
    SaliencyMask, DEFAULT_LOSS_FLOOR, DEFAULT_SALIENCY_FLOOR,
};

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReservoirBuffer;
use crate::data::{batch_of, Minibatches, Sample};
use crate::error::{CluError, Result};
use crate::model::{loss_and_weighted_grad, per_sample_loss, Batch, ModelSpec, ParamVector, SampleWeights};
use crate::task::TaskKind;

/// Largest buffer slice used for the reference remaining gradient.
pub const REMAIN_REFERENCE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastSlowConfig {
    pub alpha: f64,
    pub beta_learn: f64,
    pub beta_unlearn: f64,
    pub beta_remain: f64,
    pub k_inner: usize,
    pub k_outer: usize,
}

impl FastSlowConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha, self.beta_learn, self.beta_unlearn, self.beta_remain];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CluError::Config("fast-slow rates must be finite and positive".into()));
        }
        if self.k_outer == 0 {
            return Err(CluError::Config("k_outer must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Learn,
    Unlearn,
}

impl From<TaskKind> for Direction {
    fn from(k: TaskKind) -> Self {
        match k {
            TaskKind::Learn => Direction::Learn,
            TaskKind::Unlearn => Direction::Unlearn,
        }
    }
}

fn masked(grad: &ParamVector, mask: &SaliencyMask) -> Result<ParamVector> {
    if grad.len() != mask.len() {
        return Err(CluError::shape(format!(
            "mask of length {} for {} parameters",
            mask.len(),
            grad.len()
        )));
    }
    ParamVector::new(
        grad.as_slice()
            .iter()
            .zip(mask.bits())
            .map(|(g, &m)| if m { *g } else { 0.0 })
            .collect(),
    )
}

/// Sample weights fed to the task gradient: `(1 - ε)/N` when learning and
/// `-ε/N` when unlearning.
pub fn task_weights(coeffs: &[f64], direction: Direction) -> Result<SampleWeights> {
    let n = coeffs.len() as f64;
    SampleWeights::new(
        coeffs
            .iter()
            .map(|&e| match direction {
                Direction::Learn => (1.0 - e) / n,
                Direction::Unlearn => -e / n,
            })
            .collect(),
    )
}

/// Masked, coefficient-weighted task step. Unlearning ascends the loss.
pub fn fast_step(
    spec: &ModelSpec,
    params: &ParamVector,
    task_batch: &Batch,
    coeffs: &[f64],
    mask: &SaliencyMask,
    beta: f64,
    direction: Direction,
) -> Result<ParamVector> {
    if coeffs.len() != task_batch.len() {
        return Err(CluError::shape(format!(
            "{} coefficients for a batch of {}",
            coeffs.len(),
            task_batch.len()
        )));
    }
    let w = task_weights(coeffs, direction)?;
    let (_, g) = loss_and_weighted_grad(spec, params, task_batch, &w)?;
    params.add_scaled(-beta, &masked(&g, mask)?)
}

/// Mean-loss gradient step on one batch.
pub fn sgd_step(spec: &ModelSpec, params: &ParamVector, batch: &Batch, lr: f64) -> Result<(f64, ParamVector)> {
    let (losses, g) = loss_and_weighted_grad(spec, params, batch, &SampleWeights::mean(batch.len()))?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean, params.add_scaled(-lr, &g)?))
}

/// `k_inner` SGD steps on buffer batches. Returns the new parameters and the
/// mean loss of the last batch, if any step ran.
pub fn inner_finetune(
    spec: &ModelSpec,
    params: &ParamVector,
    buffer: &mut ReservoirBuffer,
    beta_remain: f64,
    k_inner: usize,
    batch_size: usize,
) -> Result<(ParamVector, Option<f64>)> {
    if k_inner == 0 {
        return Ok((params.clone(), None));
    }
    if buffer.is_empty() {
        debug!("memory buffer is empty; skipping remaining-set fine-tuning");
        return Ok((params.clone(), None));
    }
    let mut theta = params.clone();
    let mut last = None;
    for _ in 0..k_inner {
        let batch = buffer.sample_batch(batch_size)?;
        let (loss, next) = sgd_step(spec, &theta, &batch, beta_remain)?;
        theta = next;
        last = Some(loss);
    }
    Ok((theta, last))
}

/// `(1 - α) θ_k + α θ^R`.
pub fn slow_step(theta: &ParamVector, theta_r: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if theta.len() != theta_r.len() {
        return Err(CluError::shape("slow step operands differ in length"));
    }
    ParamVector::new(
        theta
            .as_slice()
            .iter()
            .zip(theta_r.as_slice())
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect(),
    )
}

/// `|∇L^R(θ)|` averaged over (at most the first 4096 of) the buffer, or
/// zeros when the buffer is empty.
pub fn remain_reference_grad(spec: &ModelSpec, params: &ParamVector, buffer: &ReservoirBuffer) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Ok(vec![0.0; params.len()]);
    }
    let items = &buffer.items()[..buffer.len().min(REMAIN_REFERENCE_CAP)];
    let batch = batch_of(items)?;
    let (_, g) = loss_and_weighted_grad(spec, params, &batch, &SampleWeights::mean(batch.len()))?;
    Ok(g.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UgCluConfig {
    pub alpha: f64,
    pub beta_learn: f64,
    pub beta_unlearn: f64,
    pub beta_remain: f64,
    pub k_inner: usize,
    pub schedule: CoefficientSchedule,
    pub saliency: SaliencyConfig,
    pub batch_size: usize,
}

impl UgCluConfig {
    pub fn fast_slow(&self, k_outer: usize) -> FastSlowConfig {
        FastSlowConfig {
            alpha: self.alpha,
            beta_learn: self.beta_learn,
            beta_unlearn: self.beta_unlearn,
            beta_remain: self.beta_remain,
            k_inner: self.k_inner,
            k_outer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fast_slow(1).validate()?;
        self.schedule.validate()?;
        self.saliency.validate()?;
        if self.batch_size == 0 {
            return Err(CluError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One outer iteration of a task run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub task_loss: Option<f64>,
    pub buffer_loss: Option<f64>,
    pub mask_density: f64,
    pub coeff_mean: f64,
}

/// Runs one learn or unlearn request for `k_outer` outer iterations. For
/// unlearn requests the buffer must already be erased. Learn minibatches are
/// streamed into the buffer after each outer step.
#[allow(clippy::too_many_arguments)]
pub fn run_task<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector,
    kind: TaskKind,
    task_samples: &[Sample],
    buffer: &mut ReservoirBuffer,
    cfg: &UgCluConfig,
    k_outer: usize,
    rng: &mut R,
) -> Result<(ParamVector, Vec<TraceRecord>)> {
    cfg.validate()?;
    let fs = cfg.fast_slow(k_outer);
    fs.validate()?;
    let direction = Direction::from(kind);
    let beta = match direction {
        Direction::Learn => fs.beta_learn,
        Direction::Unlearn => fs.beta_unlearn,
    };
    let g_remain0 = remain_reference_grad(spec, params, buffer)?;
    let mut cursor = Minibatches::new(task_samples.len(), cfg.batch_size)?;
    let mut theta = params.clone();
    let mut trace = Vec::with_capacity(k_outer);
    for k in 0..k_outer {
        let picked: Vec<&Sample> = cursor.next(rng).iter().map(|&i| &task_samples[i]).collect();
        let batch = batch_of(picked.iter().copied())?;
        let losses = per_sample_loss(spec, &theta, &batch)?;
        let coeffs = match direction {
            Direction::Learn => adaptive_coeffs_learn(&losses, k, k_outer, &cfg.schedule)?,
            Direction::Unlearn => adaptive_coeffs_unlearn(&losses, k, k_outer, &cfg.schedule)?,
        };
        let w = task_weights(&coeffs, direction)?;
        let (_, g_task) = loss_and_weighted_grad(spec, &theta, &batch, &w)?;
        let mask = saliency_mask(&g_task.abs(), &g_remain0, &cfg.saliency)?;
        let theta_q = theta.add_scaled(-beta, &masked(&g_task, &mask)?)?;
        let (theta_r, buffer_loss) = inner_finetune(spec, &theta_q, buffer, fs.beta_remain, fs.k_inner, cfg.batch_size)?;
        theta = slow_step(&theta, &theta_r, fs.alpha)?;
        if direction == Direction::Learn {
            let owned: Vec<Sample> = picked.into_iter().cloned().collect();
            buffer.offer(&owned)?;
        }
        trace.push(TraceRecord {
            k,
            task_loss: Some(losses.iter().sum::<f64>() / losses.len() as f64),
            buffer_loss,
            mask_density: mask.density(),
            coeff_mean: coeffs.iter().sum::<f64>() / coeffs.len() as f64,
        });
    }
    Ok((theta, trace))
}

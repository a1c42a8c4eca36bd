//! Experiment runner: executes a request sequence with one method per seed,
//! evaluates at every task boundary and writes metrics, accuracy matrices,
//! traces and timings.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, ClassCount, RunHistory, RunState, TaskTrace, MAGIC, VERSION};
pub use config::{
    BaselineSection, Cadence, ConfusionConfig, EvalConfig, ExperimentConfig, ModelConfig, OracleSection,
    TrainingConfig, UgCluSection,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline_task, train_joint_oracle, Method};
use crate::buffer::{ReservoirBuffer, RngState};
use crate::clu::run_task;
use crate::data::{batch_of, Dataset, Sample};
use crate::error::{CluError, Result};
use crate::eval::{
    clean_accuracy, forgetting_measure, kl_to_oracle, learning_accuracy, mia_score, unlearning_accuracy, accuracy,
    AccuracyMatrix, MetricReport,
};
use crate::model::{predict, ModelSpec, ParamVector};
use crate::task::{build_class_incremental, build_confusion, format_sequence, ConfusionSpec, Payload, Protocol, TaskKind};

const STREAM_INIT: u64 = 1;
const STREAM_BUFFER: u64 = 2;
const STREAM_METHOD: u64 = 3;
const STREAM_ORACLE: u64 = 4;
const STREAM_CONFUSION: u64 = 5;
const STREAM_EVAL: u64 = 1 << 20;
const STREAM_RETRAIN: u64 = 2 << 20;

/// Independent child seed for one purpose of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// One run's protocol, model and data.
pub struct Prepared {
    pub dataset: Dataset,
    pub protocol: Protocol,
    pub spec: ModelSpec,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let dataset = cfg.dataset.load()?;
    let requests = cfg.requests()?;
    let protocol = match cfg.confusion {
        Some(c) => build_confusion(
            &dataset,
            &requests,
            ConfusionSpec {
                fraction: c.fraction,
                seed: derive_seed(seed, STREAM_CONFUSION),
            },
        )?,
        None => build_class_incremental(&dataset, &requests)?,
    };
    let spec = cfg.model.build(dataset.dim, dataset.num_classes)?;
    Ok(Prepared {
        dataset,
        protocol,
        spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub name: String,
    pub task: usize,
    pub accuracy: Vec<f64>,
    pub mia: Vec<Option<f64>>,
}

/// Deterministic per-seed result written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub sequence: String,
    pub oracle_seed: u64,
    pub metrics: MetricReport,
    pub targets: Vec<TargetReport>,
}

/// Wall-clock of the method phase only, written to `timing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seed: u64,
    pub rte_seconds: f64,
    pub task_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub matrix: AccuracyMatrix,
    pub timing: RunTiming,
    pub traces: Vec<TaskTrace>,
    pub params: ParamVector,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<RunState>,
    /// Stop after this many tasks and return the state instead of a report.
    pub stop_after: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

pub enum RunResult {
    Finished(Box<RunOutput>),
    Stopped(Box<RunState>),
}

fn task_steps(cfg: &ExperimentConfig, kind: TaskKind, samples: usize) -> usize {
    match kind {
        TaskKind::Learn => cfg.training.learn_epochs * samples.div_ceil(cfg.training.batch_size),
        TaskKind::Unlearn => cfg.training.unlearn_steps,
    }
}

fn subsample(samples: Vec<Sample>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    if n == 0 || samples.len() <= n {
        return samples;
    }
    let mut picked = index::sample(rng, samples.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| samples[i].clone()).collect()
}

fn evaluate(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    params: &ParamVector,
    task: usize,
    seed: u64,
) -> Result<Checkpoint> {
    let test: Vec<&Sample> = prep.protocol.test_by_class.values().flatten().collect();
    let pred = predict(&prep.spec, params, &batch_of(test.iter().copied())?, None)?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, p) in test.iter().zip(&pred) {
        let e = counts.entry(s.label).or_default();
        e.0 += usize::from(*p == s.label);
        e.1 += 1;
    }
    let per_class = counts
        .into_iter()
        .map(|(class, (correct, total))| ClassCount { class, correct, total })
        .collect();

    let done = task + 1;
    let mut target_accuracy = Vec::new();
    let mut target_mia = Vec::new();
    let live: Vec<_> = prep.protocol.targets.iter().filter(|t| t.task_index <= task).collect();
    if !live.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_EVAL + task as u64));
        let retained = prep.protocol.retained_classes_after(done);
        let remain = subsample(prep.protocol.remaining_after(done), cfg.eval.mia_samples, &mut rng);
        let outside: Vec<Sample> = retained
            .iter()
            .filter_map(|c| prep.protocol.test_by_class.get(c))
            .flatten()
            .cloned()
            .collect();
        let outside = subsample(outside, cfg.eval.mia_samples, &mut rng);
        for t in live {
            if t.samples.is_empty() {
                return Err(CluError::validation(format!("unlearn target {} has no samples", t.name)));
            }
            target_accuracy.push(accuracy(&prep.spec, params, &t.samples)?);
            target_mia.push(if remain.is_empty() || outside.is_empty() {
                None
            } else {
                Some(mia_score(&prep.spec, params, &remain, &outside, &t.samples, &cfg.eval.attack())?)
            });
        }
    }
    Ok(Checkpoint {
        task,
        per_class,
        target_accuracy,
        target_mia,
    })
}

/// Rows follow the learn tasks whose classes survive to the end of the
/// sequence; the last row is the final model.
pub fn accuracy_matrix(protocol: &Protocol, checkpoints: &[Checkpoint]) -> Result<AccuracyMatrix> {
    let n = protocol.tasks.len();
    if checkpoints.len() != n {
        return Err(CluError::validation(format!("{} checkpoints for {n} tasks", checkpoints.len())));
    }
    let retained = protocol.retained_classes_after(n);
    let cols: Vec<(usize, BTreeSet<usize>)> = protocol
        .learn_task_indices()
        .into_iter()
        .filter_map(|t| match &protocol.tasks[t].request.payload {
            Payload::Classes(c) => {
                let kept: BTreeSet<usize> = c.iter().copied().filter(|c| retained.contains(c)).collect();
                (!kept.is_empty()).then_some((t, kept))
            }
            Payload::Samples(_) => None,
        })
        .collect();
    if cols.is_empty() {
        return Err(CluError::validation("no learned class survives to the end of the sequence"));
    }
    let pooled = |cp: &Checkpoint, classes: &BTreeSet<usize>| -> f64 {
        let (c, t) = cp
            .per_class
            .iter()
            .filter(|k| classes.contains(&k.class))
            .fold((0, 0), |(c, t), k| (c + k.correct, t + k.total));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    };
    let rows = cols
        .iter()
        .enumerate()
        .map(|(i, (t, _))| {
            let cp = if i + 1 == cols.len() { &checkpoints[n - 1] } else { &checkpoints[*t] };
            cols[..=i].iter().map(|(_, classes)| pooled(cp, classes)).collect()
        })
        .collect();
    AccuracyMatrix::new(rows)
}

fn fresh_state(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<RunState> {
    let params = prep.spec.init_params(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT)));
    let buffer = ReservoirBuffer::new(cfg.training.buffer_capacity, derive_seed(seed, STREAM_BUFFER))?
        .with_recount(cfg.training.buffer_recount);
    Ok(RunState {
        seed,
        next_task: 0,
        params,
        history: RunHistory {
            method: cfg.method.name().to_string(),
            sequence: format_sequence(&prep.protocol.tasks.iter().map(|t| t.request.clone()).collect::<Vec<_>>()),
            buffer: buffer.state(),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_METHOD))),
            checkpoints: Vec::new(),
            traces: Vec::new(),
            task_seconds: Vec::new(),
        },
    })
}

fn step_task(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    state: &mut RunState,
    buffer: &mut ReservoirBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let t = state.next_task;
    let task = &prep.protocol.tasks[t];
    let steps = task_steps(cfg, task.request.kind, task.samples.len());
    let started = Instant::now();
    if task.request.kind == TaskKind::Unlearn {
        buffer.erase(&task.request.payload);
    }
    let (params, records) = match cfg.method {
        Method::UgClu => run_task(
            &prep.spec,
            &state.params,
            task.request.kind,
            &task.samples,
            buffer,
            &cfg.ug_clu_config(),
            steps,
            rng,
        )?,
        Method::JointRt => {
            let remaining = prep.protocol.remaining_after(t + 1);
            if remaining.is_empty() {
                (state.params.clone(), Vec::new())
            } else {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, STREAM_RETRAIN + t as u64));
                (train_joint_oracle(&prep.spec, &remaining, &cfg.oracle_config(), &mut r)?, Vec::new())
            }
        }
        method => {
            // gradient-ascent pipelines learn with experience replay
            let m = match (method, task.request.kind) {
                (Method::Ga | Method::NegGradPlus, TaskKind::Learn) => Method::ErFt,
                (m, _) => m,
            };
            run_baseline_task(
                &prep.spec,
                &state.params,
                m,
                task.request.kind,
                &task.samples,
                buffer,
                &cfg.baseline_config(),
                steps,
                rng,
            )?
        }
    };
    let seconds = started.elapsed().as_secs_f64();
    if !params.is_finite() {
        return Err(CluError::validation("parameters diverged to non-finite values"));
    }
    state.params = params;
    state.history.task_seconds.push(seconds);
    state.history.traces.push(TaskTrace { task: t, records });
    let cp = evaluate(cfg, prep, &state.params, t, state.seed)?;
    state.history.checkpoints.push(cp);
    state.next_task = t + 1;
    Ok(())
}

/// Runs (or resumes) one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let prep = prepare(cfg, seed)?;
    let mut state = match opts.resume {
        Some(s) => {
            let fresh = fresh_state(cfg, &prep, seed)?;
            if s.seed != seed
                || s.history.method != fresh.history.method
                || s.history.sequence != fresh.history.sequence
                || s.params.len() != fresh.params.len()
                || s.next_task > prep.protocol.tasks.len()
                || s.history.checkpoints.len() != s.next_task
            {
                return Err(CluError::Checkpoint("checkpoint does not belong to this configuration and seed".into()));
            }
            s
        }
        None => fresh_state(cfg, &prep, seed)?,
    };
    let mut buffer = ReservoirBuffer::from_state(state.history.buffer.clone())?;
    let mut rng = state.history.rng.restore();
    let stop = opts.stop_after.unwrap_or(usize::MAX).min(prep.protocol.tasks.len());
    while state.next_task < stop {
        let t = state.next_task;
        info!("seed {seed}: task {t} {}", prep.protocol.tasks[t].request);
        step_task(cfg, &prep, &mut state, &mut buffer, &mut rng).map_err(|e| e.at_task(t))?;
        state.history.buffer = buffer.state();
        state.history.rng = RngState::capture(&rng);
        if let Some(path) = &opts.checkpoint_path {
            state.save(path)?;
        }
    }
    if state.next_task < prep.protocol.tasks.len() {
        return Ok(RunResult::Stopped(Box::new(state)));
    }
    finish(cfg, &prep, state).map(|o| RunResult::Finished(Box::new(o)))
}

fn finish(cfg: &ExperimentConfig, prep: &Prepared, state: RunState) -> Result<RunOutput> {
    let seed = state.seed;
    let hist = &state.history;
    let matrix = accuracy_matrix(&prep.protocol, &hist.checkpoints)?;
    let la = learning_accuracy(&matrix)?;
    let fm = if matrix.tasks() >= 2 && cfg.method != Method::JointRt {
        Some(forgetting_measure(&matrix)?)
    } else {
        None
    };
    let targets: Vec<TargetReport> = prep
        .protocol
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| TargetReport {
            name: t.name.clone(),
            task: t.task_index,
            accuracy: hist.checkpoints[t.task_index..].iter().map(|c| c.target_accuracy[i]).collect(),
            mia: hist.checkpoints[t.task_index..].iter().map(|c| c.target_mia[i]).collect(),
        })
        .collect();
    let ua = unlearning_accuracy(&targets.iter().map(|t| t.accuracy.clone()).collect::<Vec<_>>())?;
    let mia_worst: Vec<f64> = targets
        .iter()
        .filter_map(|t| t.mia.iter().flatten().copied().reduce(f64::max))
        .collect();
    let mia = (!mia_worst.is_empty()).then(|| mia_worst.iter().sum::<f64>() / mia_worst.len() as f64);
    let ca = if prep.protocol.confusion.is_empty() {
        None
    } else {
        let samples: Vec<Sample> = prep.protocol.confusion.iter().flat_map(|c| c.samples.clone()).collect();
        let truth: Vec<usize> = prep.protocol.confusion.iter().flat_map(|c| c.true_labels.clone()).collect();
        Some(clean_accuracy(&prep.spec, &state.params, &samples, &truth)?)
    };
    let oracle_seed = derive_seed(seed, STREAM_ORACLE);
    let remaining = prep.protocol.remaining_after(prep.protocol.tasks.len());
    let kl = if remaining.is_empty() {
        None
    } else {
        let oracle = train_joint_oracle(
            &prep.spec,
            &remaining,
            &cfg.oracle_config(),
            &mut ChaCha8Rng::seed_from_u64(oracle_seed),
        )?;
        Some(kl_to_oracle(&prep.spec, &state.params, &prep.spec, &oracle, &prep.dataset.test)?)
    };
    let timing = RunTiming {
        seed,
        rte_seconds: hist.task_seconds.iter().sum(),
        task_seconds: hist.task_seconds.clone(),
    };
    Ok(RunOutput {
        report: RunReport {
            seed,
            method: cfg.method,
            sequence: hist.sequence.clone(),
            oracle_seed,
            metrics: MetricReport { la, fm, ua, mia, ca, kl },
            targets,
        },
        matrix,
        timing,
        traces: hist.traces.clone(),
        params: state.params,
    })
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Writes `metrics.json`, `accuracy.csv`, `trace.jsonl` and `timing.json`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), report_json(&out.report)?)?;
    fs::write(dir.join("accuracy.csv"), out.matrix.to_csv())?;
    let mut lines = String::new();
    for t in &out.traces {
        for r in &t.records {
            lines.push_str(&serde_json::to_string(&serde_json::json!({
                "task": t.task,
                "k": r.k,
                "task_loss": r.task_loss,
                "buffer_loss": r.buffer_loss,
                "mask_density": r.mask_density,
                "coeff_mean": r.coeff_mean,
            }))?);
            lines.push('\n');
        }
    }
    fs::write(dir.join("trace.jsonl"), lines)?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&out.timing)? + "\n")?;
    Ok(())
}

pub fn report_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Summary>,
}

pub const METRIC_NAMES: [&str; 7] = ["la", "fm", "ua", "mia", "ca", "kl", "rte"];

fn metric_value(m: &MetricReport, name: &str) -> Option<f64> {
    match name {
        "la" => Some(m.la),
        "fm" => m.fm,
        "ua" => m.ua,
        "mia" => m.mia,
        "ca" => m.ca,
        "kl" => m.kl,
        _ => None,
    }
}

pub fn aggregate(method: Method, runs: &[(RunReport, RunTiming)]) -> Aggregate {
    let mut metrics = BTreeMap::new();
    for name in METRIC_NAMES {
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|(r, t)| {
                if name == "rte" {
                    Some(t.rte_seconds)
                } else {
                    metric_value(&r.metrics, name)
                }
            })
            .collect();
        if let Some(s) = Summary::of(&values) {
            metrics.insert(name.to_string(), s);
        }
    }
    Aggregate {
        method,
        seeds: runs.iter().map(|(r, _)| r.seed).collect(),
        metrics,
    }
}

/// Percentages for accuracy-like metrics, raw values for `fm`'s sibling `kl`
/// and seconds for `rte`.
pub fn format_aggregate(a: &Aggregate) -> String {
    let mut out = format!("method {} over {} seed(s)\n", a.method.name(), a.seeds.len());
    for name in METRIC_NAMES {
        if let Some(s) = a.metrics.get(name) {
            let line = match name {
                "kl" => format!("{name:>4}  {:.4} ± {:.4}\n", s.mean, s.std),
                "rte" => format!("{name:>4}  {:.2}s ± {:.2}s\n", s.mean, s.std),
                _ => format!("{name:>4}  {:.2} ± {:.2}\n", 100.0 * s.mean, 100.0 * s.std),
            };
            out.push_str(&line);
        }
    }
    out
}

pub struct ExperimentOutput {
    pub runs: Vec<RunOutput>,
    pub aggregate: Aggregate,
}

/// Runs every seed, in parallel threads, and writes per-seed files plus
/// `aggregate.json` under `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let results: Vec<Result<RunOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let opts = RunOptions {
                        checkpoint_path: match (cfg.training.checkpoint, out_dir) {
                            (true, Some(d)) => {
                                fs::create_dir_all(seed_dir(d, seed))?;
                                Some(seed_dir(d, seed).join("checkpoint.bin"))
                            }
                            _ => None,
                        },
                        ..RunOptions::default()
                    };
                    match run_seed(cfg, seed, opts)? {
                        RunResult::Finished(o) => Ok(*o),
                        RunResult::Stopped(_) => unreachable!("no stop requested"),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CluError::validation("worker thread panicked"))))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(RunReport, RunTiming)> = runs.iter().map(|r| (r.report.clone(), r.timing.clone())).collect();
    let agg = aggregate(cfg.method, &pairs);
    if let Some(d) = out_dir {
        for r in &runs {
            write_run(&seed_dir(d, r.report.seed), r)?;
        }
        fs::write(d.join("aggregate.json"), serde_json::to_string_pretty(&agg)? + "\n")?;
    }
    Ok(ExperimentOutput { runs, aggregate: agg })
}

/// One full run per `gamma` over the configured seeds. Returns the CSV table.
pub fn sweep_gamma(cfg: &ExperimentConfig, gammas: &[f64], out_dir: Option<&Path>) -> Result<(String, Vec<Aggregate>)> {
    if cfg.method != Method::UgClu {
        return Err(CluError::Config("the gamma sweep needs method = \"ug_clu\"".into()));
    }
    if gammas.is_empty() {
        return Err(CluError::Config("gamma list is empty".into()));
    }
    let mut csv = String::from("gamma");
    for name in METRIC_NAMES {
        csv.push_str(&format!(",{name}_mean,{name}_std"));
    }
    csv.push('\n');
    let mut all = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let mut c = cfg.clone();
        c.ug_clu.gamma = g;
        let sub = out_dir.map(|d| d.join(format!("gamma_{g}")));
        let out = run_experiment(&c, sub.as_deref())?;
        csv.push_str(&g.to_string());
        for name in METRIC_NAMES {
            match out.aggregate.metrics.get(name) {
                Some(s) => csv.push_str(&format!(",{},{}", s.mean, s.std)),
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
        all.push(out.aggregate);
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("gamma_sweep.csv"), &csv)?;
    }
    Ok((csv, all))
}

/// Trains the joint oracle on the data remaining after the whole sequence.
pub fn train_final_oracle(cfg: &ExperimentConfig, seed: u64) -> Result<(ModelSpec, ParamVector, f64)> {
    let prep = prepare(cfg, seed)?;
    let remaining = prep.protocol.remaining_after(prep.protocol.tasks.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ORACLE));
    let params = train_joint_oracle(&prep.spec, &remaining, &cfg.oracle_config(), &mut rng)?;
    let retained = prep.protocol.retained_classes_after(prep.protocol.tasks.len());
    let test: Vec<Sample> = retained
        .iter()
        .filter_map(|c| prep.protocol.test_by_class.get(c))
        .flatten()
        .cloned()
        .collect();
    let acc = accuracy(&prep.spec, &params, &test)?;
    Ok((prep.spec, params, acc))
}

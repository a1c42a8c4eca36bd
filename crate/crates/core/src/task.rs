//! Task sequences: the `(+0,1),(-0)` grammar and per-task dataset
//! materialization for class-incremental and interclass-confusion protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{CluError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Learn,
    Unlearn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Classes(Vec<usize>),
    Samples(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub kind: TaskKind,
    pub payload: Payload,
}

impl TaskRequest {
    pub fn learn(classes: Vec<usize>) -> Self {
        Self {
            kind: TaskKind::Learn,
            payload: Payload::Classes(classes),
        }
    }

    pub fn unlearn(classes: Vec<usize>) -> Self {
        Self {
            kind: TaskKind::Unlearn,
            payload: Payload::Classes(classes),
        }
    }

    pub fn unlearn_samples(ids: Vec<u64>) -> Self {
        Self {
            kind: TaskKind::Unlearn,
            payload: Payload::Samples(ids),
        }
    }
}

impl fmt::Display for TaskRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = match self.kind {
            TaskKind::Learn => '+',
            TaskKind::Unlearn => '-',
        };
        let body = match &self.payload {
            Payload::Classes(c) => c.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            Payload::Samples(s) => format!(
                "s:{}",
                s.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            ),
        };
        write!(f, "({sign}{body})")
    }
}

pub fn format_sequence(requests: &[TaskRequest]) -> String {
    requests.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
}

struct Cursor<'a> {
    text: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn err(&self, message: impl Into<String>) -> CluError {
        CluError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        match self.peek() {
            Some(c) if c == b => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(self.err(format!("expected '{}', found '{}'", b as char, c as char))),
            None => Err(self.err(format!("expected '{}', found end of input", b as char))),
        }
    }

    fn int(&mut self) -> Result<u64> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected an integer"));
        }
        let digits = std::str::from_utf8(&self.text[start..self.pos]).expect("ascii digits");
        digits.parse().map_err(|_| CluError::Parse {
            offset: start,
            message: "integer out of range".into(),
        })
    }
}

/// Parses a task sequence and checks it against its own history: learn
/// groups are disjoint and every class unlearned was learned before.
pub fn parse_sequence(text: &str) -> Result<Vec<TaskRequest>> {
    let requests = parse_grammar(text)?;
    validate_history(&requests)?;
    Ok(requests)
}

fn parse_grammar(text: &str) -> Result<Vec<TaskRequest>> {
    let mut cur = Cursor {
        text: text.as_bytes(),
        pos: 0,
    };
    let mut out = Vec::new();
    loop {
        cur.expect(b'(')?;
        let kind = match cur.peek() {
            Some(b'+') => TaskKind::Learn,
            Some(b'-') => TaskKind::Unlearn,
            _ => return Err(cur.err("expected '+' or '-'")),
        };
        cur.pos += 1;
        let by_sample = if cur.peek() == Some(b's') {
            if kind == TaskKind::Learn {
                return Err(cur.err("sample payloads are only valid for unlearn requests"));
            }
            cur.pos += 1;
            cur.expect(b':')?;
            true
        } else {
            false
        };
        let group_start = cur.pos;
        let mut ids = vec![cur.int()?];
        while cur.peek() == Some(b',') {
            cur.pos += 1;
            ids.push(cur.int()?);
        }
        cur.expect(b')')?;
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(*id) {
                return Err(CluError::validation(format!(
                    "duplicate id {id} in group starting at byte {group_start}"
                )));
            }
        }
        let payload = if by_sample {
            Payload::Samples(ids)
        } else {
            Payload::Classes(ids.into_iter().map(|c| c as usize).collect())
        };
        out.push(TaskRequest { kind, payload });
        match cur.peek() {
            None => break,
            Some(b',') => cur.pos += 1,
            Some(c) => return Err(cur.err(format!("expected ',' or end of input, found '{}'", c as char))),
        }
    }
    Ok(out)
}

fn validate_history(requests: &[TaskRequest]) -> Result<()> {
    let mut learned = BTreeSet::new();
    let mut unlearned = BTreeSet::new();
    for (t, r) in requests.iter().enumerate() {
        let Payload::Classes(classes) = &r.payload else {
            continue;
        };
        for &c in classes {
            match r.kind {
                TaskKind::Learn => {
                    if !learned.insert(c) {
                        return Err(CluError::validation(format!(
                            "task {t}: class {c} already appears in an earlier learn task"
                        )));
                    }
                }
                TaskKind::Unlearn => {
                    if !learned.contains(&c) {
                        return Err(CluError::validation(format!(
                            "task {t}: class {c} was never learned"
                        )));
                    }
                    if !unlearned.insert(c) {
                        return Err(CluError::validation(format!(
                            "task {t}: class {c} was already unlearned"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub requests: Vec<TaskRequest>,
    pub seed: u64,
}

/// Interclass-confusion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Samples whose labels were shuffled inside one learn task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSet {
    pub learn_task: usize,
    /// Carries the noisy label the learner saw.
    pub samples: Vec<Sample>,
    pub true_labels: Vec<usize>,
}

/// Training data attached to one request. Learn tasks carry the samples as
/// the learner sees them; unlearn tasks carry the forget samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub request: TaskRequest,
    pub samples: Vec<Sample>,
}

/// Something unlearned, tracked for UA and MIA at every later checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnTarget {
    pub name: String,
    pub task_index: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub num_classes: usize,
    pub tasks: Vec<TaskData>,
    pub test_by_class: BTreeMap<usize, Vec<Sample>>,
    pub confusion: Vec<ConfusionSet>,
    pub targets: Vec<UnlearnTarget>,
}

impl Protocol {
    pub fn learn_task_indices(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.request.kind == TaskKind::Learn)
            .map(|(i, _)| i)
            .collect()
    }

    /// Training samples learned and not unlearned after the first `upto` tasks.
    pub fn remaining_after(&self, upto: usize) -> Vec<Sample> {
        let mut removed = BTreeSet::new();
        let mut kept: Vec<&Sample> = Vec::new();
        for task in &self.tasks[..upto] {
            match task.request.kind {
                TaskKind::Learn => kept.extend(task.samples.iter()),
                TaskKind::Unlearn => removed.extend(task.samples.iter().map(|s| s.id)),
            }
        }
        kept.into_iter().filter(|s| !removed.contains(&s.id)).cloned().collect()
    }

    /// Classes learned and not unlearned after the first `upto` tasks.
    pub fn retained_classes_after(&self, upto: usize) -> BTreeSet<usize> {
        let mut set = BTreeSet::new();
        for task in &self.tasks[..upto] {
            if let Payload::Classes(c) = &task.request.payload {
                match task.request.kind {
                    TaskKind::Learn => set.extend(c.iter().copied()),
                    TaskKind::Unlearn => c.iter().for_each(|c| {
                        set.remove(c);
                    }),
                }
            }
        }
        set
    }
}

fn class_tests(dataset: &Dataset) -> BTreeMap<usize, Vec<Sample>> {
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in &dataset.test {
        by_class.entry(s.label).or_default().push(s.clone());
    }
    by_class
}

fn check_classes(dataset: &Dataset, requests: &[TaskRequest]) -> Result<()> {
    if dataset.test.is_empty() {
        return Err(CluError::validation("test split is empty"));
    }
    let present: BTreeSet<usize> = dataset.train.iter().map(|s| s.label).collect();
    for r in requests {
        if let Payload::Classes(c) = &r.payload {
            for class in c {
                if !present.contains(class) {
                    return Err(CluError::validation(format!(
                        "class {class} does not exist in the dataset"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Materializes learn/unlearn data for a class-incremental sequence. Sample
/// payloads must name training ids from earlier learn tasks.
pub fn build_class_incremental(dataset: &Dataset, requests: &[TaskRequest]) -> Result<Protocol> {
    build_with_labels(dataset, requests, &BTreeMap::new(), Vec::new())
}

fn build_with_labels(
    dataset: &Dataset,
    requests: &[TaskRequest],
    noisy: &BTreeMap<u64, usize>,
    confusion: Vec<ConfusionSet>,
) -> Result<Protocol> {
    validate_history(requests)?;
    check_classes(dataset, requests)?;
    let seen_label = |s: &Sample| -> Sample {
        let mut s = s.clone();
        if let Some(&y) = noisy.get(&s.id) {
            s.label = y;
        }
        s
    };
    let mut learned: BTreeMap<u64, Sample> = BTreeMap::new();
    let mut forgotten: BTreeSet<u64> = BTreeSet::new();
    let mut tasks = Vec::with_capacity(requests.len());
    let mut targets = Vec::new();
    for (t, r) in requests.iter().enumerate() {
        let samples: Vec<Sample> = match (&r.kind, &r.payload) {
            (TaskKind::Learn, Payload::Classes(classes)) => {
                let set: BTreeSet<usize> = classes.iter().copied().collect();
                let v: Vec<Sample> = dataset
                    .train
                    .iter()
                    .filter(|s| set.contains(&s.label))
                    .map(seen_label)
                    .collect();
                for s in &v {
                    learned.insert(s.id, s.clone());
                }
                v
            }
            (TaskKind::Learn, Payload::Samples(_)) => {
                return Err(CluError::validation(format!(
                    "task {t}: learn requests take class payloads"
                )))
            }
            (TaskKind::Unlearn, Payload::Classes(classes)) => {
                let mut all = Vec::new();
                for &c in classes {
                    let v: Vec<Sample> = dataset
                        .train
                        .iter()
                        .filter(|s| s.label == c && learned.contains_key(&s.id))
                        .map(|s| learned[&s.id].clone())
                        .filter(|s| !forgotten.contains(&s.id))
                        .collect();
                    targets.push(UnlearnTarget {
                        name: format!("class {c}"),
                        task_index: t,
                        samples: v.clone(),
                    });
                    all.extend(v);
                }
                all
            }
            (TaskKind::Unlearn, Payload::Samples(ids)) => {
                let mut v = Vec::with_capacity(ids.len());
                for id in ids {
                    let s = learned.get(id).ok_or_else(|| {
                        CluError::validation(format!("task {t}: sample {id} was never learned"))
                    })?;
                    if forgotten.contains(id) {
                        return Err(CluError::validation(format!(
                            "task {t}: sample {id} was already unlearned"
                        )));
                    }
                    v.push(s.clone());
                }
                targets.push(UnlearnTarget {
                    name: format!("samples@{t}"),
                    task_index: t,
                    samples: v.clone(),
                });
                v
            }
        };
        if r.kind == TaskKind::Unlearn {
            forgotten.extend(samples.iter().map(|s| s.id));
        }
        tasks.push(TaskData {
            request: r.clone(),
            samples,
        });
    }
    Ok(Protocol {
        num_classes: dataset.num_classes,
        tasks,
        test_by_class: class_tests(dataset),
        confusion,
        targets,
    })
}

/// Shuffles labels of a `fraction` of every learn task's samples. When the
/// sequence carries no sample-level unlearn requests, one per confusion set
/// is inserted right after its learn task.
pub fn build_confusion(dataset: &Dataset, requests: &[TaskRequest], spec: ConfusionSpec) -> Result<Protocol> {
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(CluError::validation("confusion fraction must lie in (0, 1)"));
    }
    validate_history(requests)?;
    check_classes(dataset, requests)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noisy = BTreeMap::new();
    let mut sets = Vec::new();
    let explicit = requests
        .iter()
        .any(|r| matches!(r.payload, Payload::Samples(_)));
    let mut expanded = Vec::new();
    let all_classes: Vec<usize> = (0..dataset.num_classes).collect();
    for r in requests {
        expanded.push(r.clone());
        let (TaskKind::Learn, Payload::Classes(classes)) = (&r.kind, &r.payload) else {
            continue;
        };
        let set: BTreeSet<usize> = classes.iter().copied().collect();
        let mut members: Vec<&Sample> = dataset.train.iter().filter(|s| set.contains(&s.label)).collect();
        let count = (spec.fraction * members.len() as f64).round() as usize;
        if count == 0 {
            return Err(CluError::validation(format!(
                "fraction {} selects no sample from a task of {}",
                spec.fraction,
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let mut chosen: Vec<&Sample> = members[..count].to_vec();
        chosen.sort_by_key(|s| s.id);
        let mut samples = Vec::with_capacity(count);
        let mut true_labels = Vec::with_capacity(count);
        for s in chosen {
            let pool: Vec<usize> = if classes.len() > 1 {
                classes.iter().copied().filter(|&c| c != s.label).collect()
            } else {
                all_classes.iter().copied().filter(|&c| c != s.label).collect()
            };
            let y = *pool.choose(&mut rng).expect("at least two classes");
            noisy.insert(s.id, y);
            let mut shown = s.clone();
            shown.label = y;
            samples.push(shown);
            true_labels.push(s.label);
        }
        let learn_task = expanded.len() - 1;
        if !explicit {
            expanded.push(TaskRequest::unlearn_samples(samples.iter().map(|s| s.id).collect()));
        }
        sets.push(ConfusionSet {
            learn_task,
            samples,
            true_labels,
        });
    }
    build_with_labels(dataset, &expanded, &noisy, sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::blobs;

    fn classes(r: &TaskRequest) -> &[usize] {
        match &r.payload {
            Payload::Classes(c) => c,
            _ => panic!("expected classes"),
        }
    }

    #[test]
    fn parses_table_header_sequence() {
        let seq = parse_sequence("(+0,1),(+2,3),(-0,1)").unwrap();
        assert_eq!(
            seq,
            vec![
                TaskRequest::learn(vec![0, 1]),
                TaskRequest::learn(vec![2, 3]),
                TaskRequest::unlearn(vec![0, 1]),
            ]
        );
        assert_eq!(format_sequence(&seq), "(+0,1),(+2,3),(-0,1)");
    }

    #[test]
    fn single_item() {
        assert_eq!(parse_sequence("(+0)").unwrap(), vec![TaskRequest::learn(vec![0])]);
    }

    #[test]
    fn unlearning_unseen_class_is_rejected() {
        assert!(matches!(
            parse_sequence("(+0,1),(-2)"),
            Err(CluError::Validation(_))
        ));
    }

    #[test]
    fn malformed_text_reports_offset() {
        match parse_sequence("(+0,1),(*2)") {
            Err(CluError::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match parse_sequence("(+0,1") {
            Err(CluError::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_sequence(""), Err(CluError::Parse { offset: 0, .. })));
    }

    #[test]
    fn duplicates_and_overlaps_are_rejected() {
        assert!(matches!(parse_sequence("(+0,0)"), Err(CluError::Validation(_))));
        assert!(matches!(parse_sequence("(+0,1),(+1,2)"), Err(CluError::Validation(_))));
        assert!(matches!(parse_sequence("(+0),(-0),(-0)"), Err(CluError::Validation(_))));
    }

    #[test]
    fn sample_payload_extension() {
        let seq = parse_sequence("(+0,1),(-s:4, 9)").unwrap();
        assert_eq!(seq[1], TaskRequest::unlearn_samples(vec![4, 9]));
        assert_eq!(format_sequence(&seq), "(+0,1),(-s:4,9)");
        assert!(parse_sequence("(+s:1)").is_err());
    }

    #[test]
    fn class_incremental_partitions_train_set() {
        let d = blobs(6, 2, 30, 5, 1.0, 4.0, 7).unwrap();
        let seq = parse_sequence("(+0,1),(+2,3),(+4,5)").unwrap();
        let p = build_class_incremental(&d, &seq).unwrap();
        assert_eq!(p.tasks.len(), 3);
        let total: usize = p.tasks.iter().map(|t| t.samples.len()).sum();
        assert_eq!(total, d.train.len());
        let ids: BTreeSet<u64> = p.tasks.iter().flat_map(|t| t.samples.iter().map(|s| s.id)).collect();
        assert_eq!(ids.len(), d.train.len());
        let test_ids: BTreeSet<u64> = p.test_by_class.values().flatten().map(|s| s.id).collect();
        assert!(ids.is_disjoint(&test_ids));
        for (task, r) in p.tasks.iter().zip(&seq) {
            assert!(task.samples.iter().all(|s| classes(r).contains(&s.label)));
        }
        assert_eq!(p, build_class_incremental(&d, &seq).unwrap());
    }

    #[test]
    fn unlearn_task_collects_forget_samples() {
        let d = blobs(4, 2, 10, 3, 1.0, 4.0, 1).unwrap();
        let seq = parse_sequence("(+0,1),(-0),(+2,3)").unwrap();
        let p = build_class_incremental(&d, &seq).unwrap();
        assert_eq!(p.tasks[1].samples.len(), 10);
        assert!(p.tasks[1].samples.iter().all(|s| s.label == 0));
        assert_eq!(p.targets.len(), 1);
        assert_eq!(p.remaining_after(3).len(), 30);
        assert_eq!(
            p.retained_classes_after(3).into_iter().collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn missing_class_is_rejected() {
        let d = blobs(4, 2, 10, 3, 1.0, 4.0, 1).unwrap();
        let seq = parse_sequence("(+0,7)").unwrap();
        assert!(build_class_incremental(&d, &seq).is_err());
    }

    #[test]
    fn confusion_fraction_counts_and_shuffles() {
        let d = blobs(2, 2, 250, 10, 1.0, 4.0, 3).unwrap();
        let seq = parse_sequence("(+0,1)").unwrap();
        let spec = ConfusionSpec { fraction: 0.1, seed: 5 };
        let p = build_confusion(&d, &seq, spec).unwrap();
        assert_eq!(p.confusion.len(), 1);
        let set = &p.confusion[0];
        assert_eq!(set.samples.len(), 50);
        for (s, &y) in set.samples.iter().zip(&set.true_labels) {
            assert_ne!(s.label, y);
            let orig = d.train.iter().find(|o| o.id == s.id).unwrap();
            assert_eq!(orig.features, s.features);
            assert_eq!(orig.label, y);
        }
        // auto-inserted per-task unlearn request
        assert_eq!(p.tasks.len(), 2);
        assert_eq!(p.tasks[1].request.kind, TaskKind::Unlearn);
        assert_eq!(p.tasks[1].samples.len(), 50);
        assert_eq!(p, build_confusion(&d, &seq, spec).unwrap());
    }

    #[test]
    fn single_confused_sample_takes_the_other_class() {
        let d = blobs(2, 2, 5, 2, 1.0, 4.0, 3).unwrap();
        let seq = parse_sequence("(+0,1)").unwrap();
        let p = build_confusion(&d, &seq, ConfusionSpec { fraction: 0.1, seed: 9 }).unwrap();
        let set = &p.confusion[0];
        assert_eq!(set.samples.len(), 1);
        assert_eq!(set.samples[0].label, 1 - set.true_labels[0]);
    }

    #[test]
    fn confusion_fraction_too_small() {
        let d = blobs(2, 2, 5, 2, 1.0, 4.0, 3).unwrap();
        let seq = parse_sequence("(+0,1)").unwrap();
        assert!(build_confusion(&d, &seq, ConfusionSpec { fraction: 0.01, seed: 1 }).is_err());
    }
}

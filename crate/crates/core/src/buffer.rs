//! Reservoir-sampled replay memory with erasure and tombstones.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_of, Sample};
use crate::error::{CluError, Result};
use crate::model::Batch;
use crate::task::Payload;

/// Snapshot of the generator position so a buffer can resume bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<Sample>,
    seen_count: u64,
    recount: bool,
    tombstones: BTreeSet<u64>,
    erased_classes: BTreeSet<usize>,
    streamed: BTreeSet<u64>,
    rng: ChaCha8Rng,
}

/// Plain-data image of a buffer for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferState {
    pub capacity: usize,
    pub items: Vec<Sample>,
    pub seen_count: u64,
    pub recount: bool,
    pub tombstones: Vec<u64>,
    pub erased_classes: Vec<usize>,
    pub streamed: Vec<u64>,
    pub rng: RngState,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(CluError::validation("buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen_count: 0,
            recount: false,
            tombstones: BTreeSet::new(),
            erased_classes: BTreeSet::new(),
            streamed: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Decrement the stream counter on erase instead of keeping it monotone.
    pub fn with_recount(mut self, recount: bool) -> Self {
        self.recount = recount;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn contains(&self, id: u64) -> bool {
        self.items.iter().any(|s| s.id == id)
    }

    fn is_erased(&self, s: &Sample) -> bool {
        self.tombstones.contains(&s.id) || self.erased_classes.contains(&s.label)
    }

    /// One reservoir step. Samples matching an earlier erasure are dropped
    /// without touching the stream counter.
    pub fn observe(&mut self, sample: Sample) -> Result<()> {
        if self.contains(sample.id) {
            return Err(CluError::DuplicateSample(sample.id));
        }
        if self.is_erased(&sample) {
            return Ok(());
        }
        self.seen_count += 1;
        self.streamed.insert(sample.id);
        if self.items.len() < self.capacity {
            self.items.push(sample);
        } else {
            let j = self.rng.random_range(0..self.seen_count);
            if (j as usize) < self.capacity {
                self.items[j as usize] = sample;
            }
        }
        Ok(())
    }

    /// Streams samples not seen before; repeated epochs over the same task
    /// data do not re-enter the reservoir.
    pub fn offer(&mut self, samples: &[Sample]) -> Result<()> {
        for s in samples {
            if !self.streamed.contains(&s.id) {
                self.observe(s.clone())?;
            }
        }
        Ok(())
    }

    /// Removes every item matching the payload and tombstones it.
    pub fn erase(&mut self, predicate: &Payload) -> usize {
        match predicate {
            Payload::Classes(c) => self.erased_classes.extend(c.iter().copied()),
            Payload::Samples(ids) => self.tombstones.extend(ids.iter().copied()),
        }
        let before = self.items.len();
        let (erased_classes, tombstones) = (&self.erased_classes, &self.tombstones);
        self.items
            .retain(|s| !(tombstones.contains(&s.id) || erased_classes.contains(&s.label)));
        let removed = before - self.items.len();
        if self.recount {
            self.seen_count -= removed as u64;
        }
        removed
    }

    /// `n` items, without replacement when `n <= len`, with replacement
    /// otherwise.
    pub fn sample_items(&mut self, n: usize) -> Result<Vec<&Sample>> {
        if self.items.is_empty() {
            return Err(CluError::EmptyBuffer);
        }
        let len = self.items.len();
        let picks: Vec<usize> = if n <= len {
            index::sample(&mut self.rng, len, n).into_vec()
        } else {
            (0..n).map(|_| self.rng.random_range(0..len)).collect()
        };
        Ok(picks.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn sample_batch(&mut self, n: usize) -> Result<Batch> {
        batch_of(self.sample_items(n)?)
    }

    /// Whole buffer as one batch, in storage order.
    pub fn all(&self) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(CluError::EmptyBuffer);
        }
        batch_of(&self.items)
    }

    pub fn state(&self) -> BufferState {
        BufferState {
            capacity: self.capacity,
            items: self.items.clone(),
            seen_count: self.seen_count,
            recount: self.recount,
            tombstones: self.tombstones.iter().copied().collect(),
            erased_classes: self.erased_classes.iter().copied().collect(),
            streamed: self.streamed.iter().copied().collect(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_state(state: BufferState) -> Result<Self> {
        if state.capacity == 0 || state.items.len() > state.capacity {
            return Err(CluError::Checkpoint("buffer state violates capacity".into()));
        }
        Ok(Self {
            capacity: state.capacity,
            items: state.items,
            seen_count: state.seen_count,
            recount: state.recount,
            tombstones: state.tombstones.into_iter().collect(),
            erased_classes: state.erased_classes.into_iter().collect(),
            streamed: state.streamed.into_iter().collect(),
            rng: state.rng.restore(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, label: usize) -> Sample {
        Sample {
            id,
            features: vec![id as f64],
            label,
        }
    }

    #[test]
    fn fill_phase_keeps_everything() {
        let mut b = ReservoirBuffer::new(3, 0).unwrap();
        for i in 0..3 {
            b.observe(sample(i, 0)).unwrap();
        }
        let ids: Vec<u64> = b.items().iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(b.seen_count(), 3);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut b = ReservoirBuffer::new(3, 0).unwrap();
        b.observe(sample(1, 0)).unwrap();
        assert!(matches!(b.observe(sample(1, 0)), Err(CluError::DuplicateSample(1))));
    }

    #[test]
    fn erase_class_removes_all_matches() {
        let mut b = ReservoirBuffer::new(10, 0).unwrap();
        for i in 0..8 {
            b.observe(sample(i, (i % 2) as usize)).unwrap();
        }
        assert_eq!(b.erase(&Payload::Classes(vec![0])), 4);
        assert!(b.items().iter().all(|s| s.label != 0));
        assert_eq!(b.erase(&Payload::Classes(vec![7])), 0);
        assert_eq!(b.len(), 4);
        assert_eq!(b.seen_count(), 8);
        for _ in 0..50 {
            let batch = b.sample_batch(3).unwrap();
            assert!(batch.labels().iter().all(|&y| y == 1));
        }
        // erased classes never come back
        b.observe(sample(100, 0)).unwrap();
        assert!(!b.contains(100));
    }

    #[test]
    fn erase_samples_tombstones_ids() {
        let mut b = ReservoirBuffer::new(10, 0).unwrap();
        for i in 0..5 {
            b.observe(sample(i, 0)).unwrap();
        }
        assert_eq!(b.erase(&Payload::Samples(vec![1, 3, 42])), 2);
        b.observe(sample(3, 0)).unwrap();
        assert!(!b.contains(3));
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn recount_decrements_stream_position() {
        let mut b = ReservoirBuffer::new(10, 0).unwrap().with_recount(true);
        for i in 0..5 {
            b.observe(sample(i, (i % 2) as usize)).unwrap();
        }
        b.erase(&Payload::Classes(vec![1]));
        assert_eq!(b.seen_count(), 3);
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let mut b = ReservoirBuffer::new(6, 4).unwrap();
        for i in 0..6 {
            b.observe(sample(i, 0)).unwrap();
        }
        let mut ids: Vec<u64> = b.sample_items(6).unwrap().iter().map(|s| s.id).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(b.sample_items(20).unwrap().len(), 20);
    }

    #[test]
    fn empty_buffer_cannot_sample() {
        let mut b = ReservoirBuffer::new(2, 0).unwrap();
        assert!(matches!(b.sample_batch(1), Err(CluError::EmptyBuffer)));
    }

    #[test]
    fn offer_streams_each_id_once() {
        let mut b = ReservoirBuffer::new(4, 0).unwrap();
        let s: Vec<Sample> = (0..3).map(|i| sample(i, 0)).collect();
        b.offer(&s).unwrap();
        b.offer(&s).unwrap();
        assert_eq!(b.seen_count(), 3);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut a = ReservoirBuffer::new(5, 8).unwrap();
        for i in 0..20 {
            a.observe(sample(i, (i % 3) as usize)).unwrap();
        }
        a.erase(&Payload::Classes(vec![2]));
        let mut b = ReservoirBuffer::from_state(a.state()).unwrap();
        for i in 20..40 {
            a.observe(sample(i, 0)).unwrap();
            b.observe(sample(i, 0)).unwrap();
        }
        assert_eq!(a.state(), b.state());
        let x: Vec<u64> = a.sample_items(4).unwrap().iter().map(|s| s.id).collect();
        let y: Vec<u64> = b.sample_items(4).unwrap().iter().map(|s| s.id).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn same_seed_same_contents() {
        let run = || {
            let mut b = ReservoirBuffer::new(7, 3).unwrap();
            for i in 0..100 {
                b.observe(sample(i, 0)).unwrap();
            }
            b.state()
        };
        assert_eq!(run(), run());
    }
}

//! Task-boundary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size   | field                                      |
//! |--------|--------|--------------------------------------------|
//! | 0      | 8      | magic `CLUCKPT\0`                          |
//! | 8      | 4      | format version (`u32`, currently 1)        |
//! | 12     | 8      | run seed (`u64`)                           |
//! | 20     | 8      | index of the next task to run (`u64`)      |
//! | 28     | 8      | parameter count `P` (`u64`)                |
//! | 36     | 8·P    | parameters as IEEE-754 `f64` bit patterns  |
//! | 36+8P  | 8      | history length `H` (`u64`)                 |
//! | 44+8P  | H      | history as UTF-8 JSON ([`RunHistory`])     |
//!
//! The file must end exactly after the history.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::{BufferState, RngState};
use crate::clu::TraceRecord;
use crate::error::{CluError, Result};
use crate::model::ParamVector;

pub const MAGIC: &[u8; 8] = b"CLUCKPT\0";
pub const VERSION: u32 = 1;

/// Correct and total test predictions for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

/// Everything measured at one task boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task: usize,
    pub per_class: Vec<ClassCount>,
    /// Accuracy on each target unlearned so far, in target order.
    pub target_accuracy: Vec<f64>,
    /// Attack success on each target unlearned so far; `None` when the
    /// attack sets were empty.
    pub target_mia: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task: usize,
    pub records: Vec<TraceRecord>,
}

/// Mutable run state other than the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: String,
    pub sequence: String,
    pub buffer: BufferState,
    pub rng: RngState,
    pub checkpoints: Vec<Checkpoint>,
    pub traces: Vec<TaskTrace>,
    pub task_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub seed: u64,
    pub next_task: usize,
    pub params: ParamVector,
    pub history: RunHistory,
}

impl RunState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.history)?;
        let p = self.params.as_slice();
        let mut out = Vec::with_capacity(44 + 8 * p.len() + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.next_task as u64).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CluError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CluError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let next_task = usize::try_from(r.u64()?).map_err(|_| CluError::Checkpoint("task index overflows".into()))?;
        let count = usize::try_from(r.u64()?).map_err(|_| CluError::Checkpoint("parameter count overflows".into()))?;
        if count > bytes.len() / 8 {
            return Err(CluError::Checkpoint("parameter count exceeds file size".into()));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(f64::from_bits(r.u64()?));
        }
        let params = ParamVector::new(params).map_err(|e| CluError::Checkpoint(e.to_string()))?;
        let len = usize::try_from(r.u64()?).map_err(|_| CluError::Checkpoint("history length overflows".into()))?;
        let history: RunHistory = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(CluError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            seed,
            next_task,
            params,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CluError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::ReservoirBuffer;
    use crate::data::Sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> RunState {
        let mut buffer = ReservoirBuffer::new(4, 3).unwrap();
        buffer
            .observe(Sample {
                id: 7,
                features: vec![0.1, 1.0 / 3.0],
                label: 1,
            })
            .unwrap();
        RunState {
            seed: 9,
            next_task: 2,
            params: ParamVector::new(vec![0.1, -2.5e-300, 1.0 / 7.0]).unwrap(),
            history: RunHistory {
                method: "ug_clu".into(),
                sequence: "(+0,1),(-0)".into(),
                buffer: buffer.state(),
                rng: RngState::capture(&ChaCha8Rng::seed_from_u64(5)),
                checkpoints: vec![Checkpoint {
                    task: 0,
                    per_class: vec![ClassCount {
                        class: 0,
                        correct: 3,
                        total: 4,
                    }],
                    target_accuracy: vec![],
                    target_mia: vec![],
                }],
                traces: vec![],
                task_seconds: vec![0.25],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(RunState::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = state().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RunState::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(RunState::from_bytes(&v2).is_err());
        assert!(RunState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(RunState::from_bytes(&long).is_err());
    }
}

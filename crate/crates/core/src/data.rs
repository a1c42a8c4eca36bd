//! Desk-scale datasets: seeded Gaussian blobs, concentric rings, and CSV
//! ingestion (`id,label,f0,f1,...`).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CluError, Result};
use crate::model::Batch;

/// One labelled sample with a stable identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Immutable train/test collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_center_scale")]
        center_scale: f64,
        #[serde(default)]
        seed: u64,
    },
    Rings {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_ring_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: String,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_spread() -> f64 {
    1.0
}
fn default_center_scale() -> f64 {
    4.0
}
fn default_ring_noise() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match *self {
            DatasetSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
                center_scale,
                seed,
            } => blobs(classes, dim, train_per_class, test_per_class, spread, center_scale, seed),
            DatasetSpec::Rings {
                classes,
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => rings(classes, train_per_class, test_per_class, noise, seed),
            DatasetSpec::Csv {
                ref path,
                test_fraction,
                seed,
            } => load_csv(Path::new(path), test_fraction, seed),
        }
    }
}

fn check_sizes(classes: usize, train_per_class: usize, test_per_class: usize) -> Result<()> {
    if classes < 2 {
        return Err(CluError::validation("dataset needs at least two classes"));
    }
    if train_per_class == 0 {
        return Err(CluError::validation("train split is empty"));
    }
    if test_per_class == 0 {
        return Err(CluError::validation("test split is empty"));
    }
    Ok(())
}

/// Isotropic Gaussian clusters around seeded uniform centres.
pub fn blobs(
    classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    center_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    check_sizes(classes, train_per_class, test_per_class)?;
    if dim == 0 {
        return Err(CluError::validation("blob dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-center_scale..center_scale)).collect())
        .collect();
    let mut draw = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        centers[c]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + spread * z
            })
            .collect()
    };
    let (train, test) = generate(classes, train_per_class, test_per_class, &mut rng, &mut draw);
    Ok(Dataset {
        dim,
        num_classes: classes,
        train,
        test,
    })
}

/// Two-dimensional concentric rings, one radius per class.
pub fn rings(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    check_sizes(classes, train_per_class, test_per_class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let r = 1.0 + c as f64;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let z: f64 = StandardNormal.sample(rng);
        let rad = r + noise * z;
        vec![rad * angle.cos(), rad * angle.sin()]
    };
    let (train, test) = generate(classes, train_per_class, test_per_class, &mut rng, &mut draw);
    Ok(Dataset {
        dim: 2,
        num_classes: classes,
        train,
        test,
    })
}

fn generate(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    rng: &mut ChaCha8Rng,
    draw: &mut impl FnMut(usize, &mut ChaCha8Rng) -> Vec<f64>,
) -> (Vec<Sample>, Vec<Sample>) {
    let mut train = Vec::with_capacity(classes * train_per_class);
    let mut test = Vec::with_capacity(classes * test_per_class);
    for c in 0..classes {
        for _ in 0..train_per_class {
            train.push((c, draw(c, rng)));
        }
    }
    for c in 0..classes {
        for _ in 0..test_per_class {
            test.push((c, draw(c, rng)));
        }
    }
    let mut id = 0u64;
    let mut label = |v: Vec<(usize, Vec<f64>)>| -> Vec<Sample> {
        v.into_iter()
            .map(|(label, features)| {
                id += 1;
                Sample {
                    id: id - 1,
                    features,
                    label,
                }
            })
            .collect()
    };
    let train = label(train);
    let test = label(test);
    (train, test)
}

/// Reads `id,label,f0,f1,...` rows and splits off a seeded test fraction.
pub fn load_csv(path: &Path, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_csv(file, test_fraction, seed)
}

pub fn parse_csv<R: std::io::Read>(reader: R, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CluError::validation("test_fraction must lie in (0, 1)"));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CluError::Config(format!("csv header: {e}")))?
        .clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(CluError::Config(
            "csv header must be `id,label,f0,f1,...`".into(),
        ));
    }
    let dim = headers.len() - 2;
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CluError::Config(format!("csv row {}: {e}", row + 1)))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let id: u64 = field(0)
            .parse()
            .map_err(|_| CluError::Config(format!("csv row {}: bad id", row + 1)))?;
        let label: usize = field(1)
            .parse()
            .map_err(|_| CluError::Config(format!("csv row {}: bad label", row + 1)))?;
        let features = (0..dim)
            .map(|j| {
                field(j + 2)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CluError::Config(format!("csv row {}: bad feature f{j}", row + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !ids.insert(id) {
            return Err(CluError::validation(format!("duplicate sample id {id}")));
        }
        samples.push(Sample { id, features, label });
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    if num_classes < 2 {
        return Err(CluError::validation("csv dataset needs at least two classes"));
    }
    // stratified split so every class keeps test samples
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<Sample> = samples.iter().filter(|s| s.label == c).cloned().collect();
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(members.len());
        let rest = members.split_off(n_test);
        test.extend(members);
        train.extend(rest);
    }
    if test.is_empty() {
        return Err(CluError::validation("test split is empty"));
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    Ok(Dataset {
        dim,
        num_classes,
        train,
        test,
    })
}

/// Epoch-wise shuffled minibatch indices over a fixed sample list.
#[derive(Debug, Clone)]
pub struct Minibatches {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Minibatches {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 {
            return Err(CluError::validation("no samples to draw minibatches from"));
        }
        if batch_size == 0 {
            return Err(CluError::validation("batch size must be positive"));
        }
        Ok(Self {
            order: (0..len).collect(),
            pos: len,
            batch_size,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Next index block; the order is reshuffled at every epoch start and the
    /// last block of an epoch may be short.
    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = &self.order[self.pos..end];
        self.pos = end;
        out
    }
}

pub fn batch_of<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Batch> {
    Batch::from_rows(samples.into_iter().map(|s| (s.features.as_slice(), s.label)))
}

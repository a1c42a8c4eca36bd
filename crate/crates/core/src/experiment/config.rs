//! TOML experiment configuration.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! sequence = "(+0,1),(+2,3),(-0)"
//! method = "ug_clu"            # ug_clu | joint_rt | ft | er_ft | ga | neggrad_plus
//! out_dir = "runs/demo"
//!
//! [dataset]                    # kind = blobs | rings | csv
//! kind = "blobs"
//! classes = 4
//! dim = 8
//! train_per_class = 100
//! test_per_class = 50
//!
//! [model]                      # kind = mlp | tiny_conv
//! kind = "mlp"
//! hidden = [32]
//!
//! [confusion]                  # optional: interclass-confusion protocol
//! fraction = 0.1
//! ```
//!
//! `[training]`, `[ug_clu]`, `[baseline]`, `[oracle]` and `[eval]` are
//! optional; every key has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, Method, OracleConfig};
use crate::clu::{CoefficientSchedule, SaliencyConfig, UgCluConfig, DEFAULT_LOSS_FLOOR, DEFAULT_SALIENCY_FLOOR};
use crate::data::DatasetSpec;
use crate::error::{CluError, Result};
use crate::eval::{AttackConfig, AttackFeatures};
use crate::model::{Activation, ModelSpec};
use crate::task::{parse_sequence, TaskRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub sequence: String,
    pub method: Method,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub confusion: Option<ConfusionConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ug_clu: UgCluSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    TinyConv {
        channels: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

impl ModelConfig {
    pub fn build(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Mlp { hidden, activation } => ModelSpec::mlp(input_dim, hidden.clone(), num_classes, *activation),
            ModelConfig::TinyConv { channels, activation } => {
                ModelSpec::tiny_conv(input_dim, channels.clone(), num_classes, *activation)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionConfig {
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Passes over a learn task's data.
    pub learn_epochs: usize,
    /// Outer iterations spent on an unlearn request.
    pub unlearn_steps: usize,
    pub buffer_capacity: usize,
    pub buffer_recount: bool,
    /// Rewrite `checkpoint.bin` in the seed directory after every task.
    pub checkpoint: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learn_epochs: 5,
            unlearn_steps: 40,
            buffer_capacity: 500,
            buffer_recount: false,
            checkpoint: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UgCluSection {
    pub alpha: f64,
    pub beta_learn: f64,
    pub beta_unlearn: f64,
    pub beta_remain: f64,
    pub k_inner: usize,
    pub lambda_learn: f64,
    pub lambda_unlearn: f64,
    pub gamma: f64,
}

impl Default for UgCluSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta_learn: 0.1,
            beta_unlearn: 0.05,
            beta_remain: 0.05,
            k_inner: 2,
            lambda_learn: 1.0,
            lambda_unlearn: 1.0,
            gamma: 1.0,
        }
    }
}

impl UgCluSection {
    pub fn to_config(&self, batch_size: usize) -> UgCluConfig {
        UgCluConfig {
            alpha: self.alpha,
            beta_learn: self.beta_learn,
            beta_unlearn: self.beta_unlearn,
            beta_remain: self.beta_remain,
            k_inner: self.k_inner,
            schedule: CoefficientSchedule {
                lambda_learn: self.lambda_learn,
                lambda_unlearn: self.lambda_unlearn,
                loss_floor: DEFAULT_LOSS_FLOOR,
            },
            saliency: SaliencyConfig {
                gamma: self.gamma,
                floor: DEFAULT_SALIENCY_FLOOR,
            },
            batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub lr: f64,
    pub unlearn_lr: f64,
    pub neggrad_balance: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            lr: 0.1,
            unlearn_lr: 0.05,
            neggrad_balance: 0.5,
        }
    }
}

impl BaselineSection {
    pub fn to_config(&self, batch_size: usize) -> BaselineConfig {
        BaselineConfig {
            lr: self.lr,
            unlearn_lr: self.unlearn_lr,
            neggrad_balance: self.neggrad_balance,
            batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub epochs: usize,
    pub lr: f64,
    pub min_train_accuracy: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.1,
            min_train_accuracy: 0.9,
        }
    }
}

impl OracleSection {
    pub fn to_config(&self, batch_size: usize) -> OracleConfig {
        OracleConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size,
            min_train_accuracy: self.min_train_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    #[default]
    PerTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cadence: Cadence,
    /// Size of each of the member and non-member attack sets; 0 uses all.
    pub mia_samples: usize,
    pub mia_features: AttackFeatures,
    pub mia_l2: f64,
    pub mia_lr: f64,
    pub mia_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            cadence: Cadence::PerTask,
            mia_samples: 200,
            mia_features: a.features,
            mia_l2: a.l2,
            mia_lr: a.lr,
            mia_iterations: a.iterations,
        }
    }
}

impl EvalConfig {
    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            features: self.mia_features,
            l2: self.mia_l2,
            lr: self.mia_lr,
            iterations: self.mia_iterations,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CluError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CluError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CluError::Config(e.to_string()))
    }

    pub fn requests(&self) -> Result<Vec<TaskRequest>> {
        parse_sequence(&self.sequence)
    }

    pub fn ug_clu_config(&self) -> UgCluConfig {
        self.ug_clu.to_config(self.training.batch_size)
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        self.baseline.to_config(self.training.batch_size)
    }

    pub fn oracle_config(&self) -> OracleConfig {
        self.oracle.to_config(self.training.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CluError::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(CluError::Config("seeds must be distinct".into()));
        }
        self.requests()?;
        if let DatasetSpec::Csv { path, .. } = &self.dataset {
            if !Path::new(path).is_file() {
                return Err(CluError::Config(format!("dataset file {path} does not exist")));
            }
        }
        if let Some(c) = &self.confusion {
            if !(c.fraction > 0.0 && c.fraction < 1.0) {
                return Err(CluError::Config("confusion fraction must lie in (0, 1)".into()));
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || t.learn_epochs == 0 || t.unlearn_steps == 0 || t.buffer_capacity == 0 {
            return Err(CluError::Config(
                "batch_size, learn_epochs, unlearn_steps and buffer_capacity must be positive".into(),
            ));
        }
        self.ug_clu_config().validate()?;
        self.baseline_config().validate()?;
        let o = &self.oracle;
        if o.epochs == 0 || !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(CluError::Config("oracle needs positive epochs and learning rate".into()));
        }
        let e = &self.eval;
        if !(e.mia_lr > 0.0 && e.mia_l2 >= 0.0) || e.mia_iterations == 0 {
            return Err(CluError::Config("attack needs a positive rate and iteration count".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seeds = [1, 2]
sequence = "(+0,1),(-0)"
method = "er_ft"

[dataset]
kind = "blobs"
classes = 3
dim = 2
train_per_class = 10
test_per_class = 5

[model]
kind = "mlp"
hidden = [8]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.method, Method::ErFt);
        assert_eq!(c.training, TrainingConfig::default());
        assert_eq!(c.ug_clu.gamma, 1.0);
        assert!(c.confusion.is_none());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_seq = MINIMAL.replace("(+0,1),(-0)", "(+0,1),(*0)");
        assert!(matches!(ExperimentConfig::from_toml(&bad_seq), Err(CluError::Parse { .. })));
        let no_seeds = MINIMAL.replace("[1, 2]", "[]");
        assert!(ExperimentConfig::from_toml(&no_seeds).is_err());
        let unknown = format!("{MINIMAL}\n[training]\nepochs = 3\n");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
        let method = MINIMAL.replace("er_ft", "sgd");
        assert!(ExperimentConfig::from_toml(&method).is_err());
        let csv = MINIMAL.replace("kind = \"blobs\"\nclasses = 3\ndim = 2\ntrain_per_class = 10\ntest_per_class = 5", "kind = \"csv\"\npath = \"/no/such/file.csv\"");
        assert!(ExperimentConfig::from_toml(&csv).is_err());
    }
}

//! End-to-end experiment driver: teacher training, distillation with each
//! method, hyperparameter grid search, loyalty evaluation, and saliency
//! report emission.
//!
//! Everything here is deterministic in `(config, seed)`: batch order,
//! dropout masks, and initialization all derive from the config seed, so a
//! rerun reproduces every logged metric bit for bit (wall-clock time is the
//! one exception and is quarantined in its own field).

mod grid;
mod optim;
mod rundir;
mod saliency;
mod train;

pub use grid::{grid_search, GridOutcome, GridRun, GridSpec};
pub use optim::{Adam, AdamParams};
pub use rundir::{metrics_csv, result_json, write_run_artifacts};
pub use saliency::{check_html_balanced, saliency_report, ReportFormat};
pub use train::{distill, eval_loyalty, train_teacher};


use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, GeneratorSpec, SyntheticData};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::LoyaltyReport;
use crate::model::ModelConfig;

// ── Method ───────────────────────────────────────────────────────────────

/// Training objective for the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy on the labels; the teacher is ignored.
    Finetune,
    /// Hard CE blended with temperature-softened CE against the teacher.
    VanillaKd,
    /// Vanilla KD plus normalized `[CLS]`-state alignment on mapped layers.
    BertPkd,
    /// Vanilla KD plus input-embedding gradient alignment.
    Gkd,
    /// The full objective: state alignment plus embedding- and
    /// `[CLS]`-gradient alignment.
    GkdCls,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Finetune, Method::VanillaKd, Method::BertPkd, Method::Gkd, Method::GkdCls];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::VanillaKd => "vanilla_kd",
            Method::BertPkd => "bert_pkd",
            Method::Gkd => "gkd",
            Method::GkdCls => "gkd_cls",
        }
    }

    /// Does the objective consume the teacher at all?
    pub fn uses_teacher(self) -> bool {
        self != Method::Finetune
    }

    /// Does the objective align gradients (and therefore double-backprop)?
    pub fn aligns_gradients(self) -> bool {
        matches!(self, Method::Gkd | Method::GkdCls)
    }

    /// Does the objective need a student→teacher layer map?
    pub fn maps_cls_states(self) -> bool {
        matches!(self, Method::BertPkd | Method::GkdCls)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

// ── Task ─────────────────────────────────────────────────────────────────

/// Where the dataset comes from: an on-disk directory written by
/// [`data::save_dataset`], or a generator spec evaluated with `data_seed`.
/// Exactly one of the two sources must be set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<GeneratorSpec>,
}

impl TaskSpec {
    pub fn from_dir(dir: impl Into<PathBuf>) -> TaskSpec {
        TaskSpec { dataset_dir: Some(dir.into()), data_seed: 0, synthetic: None }
    }

    pub fn generated(spec: GeneratorSpec, data_seed: u64) -> TaskSpec {
        TaskSpec { dataset_dir: None, data_seed, synthetic: Some(spec) }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset_dir, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(
                "task gives both a dataset directory and a generator spec; pick one".into(),
            )),
            (None, None) => Err(Error::Config(
                "task needs a dataset directory or a generator spec".into(),
            )),
            (_, Some(spec)) => spec.validate(),
            (Some(_), None) => Ok(()),
        }
    }

    /// Loads or generates the three splits.
    pub fn load(&self) -> Result<SyntheticData> {
        self.validate()?;
        match (&self.dataset_dir, &self.synthetic) {
            (Some(dir), None) => data::load_dataset(dir),
            (None, Some(spec)) => data::generate(spec, self.data_seed),
            _ => unreachable!("validate admits exactly one source"),
        }
    }
}

// ── Optimizer settings ───────────────────────────────────────────────────

/// Loop hyperparameters; the update rule itself lives in [`Adam`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings { learning_rate: 1e-3, batch_size: 32, epochs: 4 }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        Ok(())
    }
}

// ── Experiment config ────────────────────────────────────────────────────

fn default_true() -> bool {
    true
}

/// One experiment, fully specified. Scalar fields come before the nested
/// tables so the TOML snapshot serializes cleanly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// Dropout during teacher training (the teacher is always evaluated
    /// with dropout off once trained).
    #[serde(default = "default_true")]
    pub teacher_dropout: bool,
    /// Dropout during student training. Gradient-aligning methods override
    /// this to off unless [`dropout_ablation`](Self::dropout_ablation) is
    /// set, because sampled masks bias the student's input gradients.
    #[serde(default = "default_true")]
    pub student_dropout: bool,
    /// Ablation switch: keep student dropout active even for `gkd` /
    /// `gkd_cls`, to measure what the deactivation policy buys.
    #[serde(default)]
    pub dropout_ablation: bool,
    pub output_dir: PathBuf,
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    pub task: TaskSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.student.n_layers > self.teacher.n_layers {
            return Err(Error::Config(format!(
                "student depth {} exceeds teacher depth {}",
                self.student.n_layers, self.teacher.n_layers
            )));
        }
        for (s, t, name) in [
            (self.student.vocab_size, self.teacher.vocab_size, "vocab_size"),
            (self.student.max_len, self.teacher.max_len, "max_len"),
            (self.student.n_classes, self.teacher.n_classes, "n_classes"),
        ] {
            if s != t {
                return Err(Error::Config(format!(
                    "student and teacher must agree on {name}: {s} vs {t}"
                )));
            }
        }
        if self.dropout_ablation && !self.method.aligns_gradients() {
            return Err(Error::Config(format!(
                "dropout_ablation only applies to gradient-aligning methods, not {}",
                self.method
            )));
        }
        Ok(())
    }

    /// Whether student-side dropout masks may be sampled during training.
    pub fn student_dropout_active(&self) -> bool {
        if self.method.aligns_gradients() {
            self.dropout_ablation
        } else {
            self.student_dropout
        }
    }

    /// SHA-256 over the canonical JSON serialization with `output_dir`
    /// cleared: the hash identifies the experiment, not where its
    /// artifacts happen to land.
    pub fn config_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = PathBuf::new();
        let json = serde_json::to_string(&normalized).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config to TOML: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config from TOML: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Desk-scale defaults: 4-layer/64-wide teacher, 2-layer student,
    /// 1,000-token vocabulary, 32 positions, batch 32, 4 epochs, and a
    /// balanced 4-class synthetic task with 10% label noise.
    pub fn desk_scale(method: Method, output_dir: impl Into<PathBuf>) -> ExperimentConfig {
        let teacher = ModelConfig {
            vocab_size: 1000,
            max_len: 32,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 128,
            n_classes: 4,
            dropout_rate: 0.1,
        };
        let student = ModelConfig { n_layers: 2, ..teacher.clone() };
        let generator = GeneratorSpec {
            n_classes: 4,
            vocab_words: 998,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            min_len: 3,
            max_len: 31,
            noise_rate: 0.1,
        };
        let weights = match method {
            Method::Finetune | Method::VanillaKd => {
                LossWeights { alpha: 0.5, tau: 10.0, beta: 0.0, gamma: 0.0 }
            }
            Method::BertPkd => LossWeights { alpha: 0.5, tau: 10.0, beta: 500.0, gamma: 0.0 },
            Method::Gkd => LossWeights { alpha: 0.5, tau: 10.0, beta: 0.1, gamma: 0.0 },
            Method::GkdCls => LossWeights { alpha: 0.5, tau: 10.0, beta: 500.0, gamma: 0.05 },
        };
        ExperimentConfig {
            method,
            seed: 0,
            teacher_dropout: true,
            student_dropout: true,
            dropout_ablation: false,
            output_dir: output_dir.into(),
            weights,
            optimizer: OptimizerSettings::default(),
            task: TaskSpec::generated(generator, 0),
            teacher,
            student,
        }
    }
}

// ── Run results ──────────────────────────────────────────────────────────

/// Which model a [`RunResult`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRole {
    Teacher,
    Student,
}

/// One epoch of training, measured after the epoch's last update. The
/// validation loss is plain cross-entropy with dropout off regardless of
/// the training objective, so methods stay comparable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Component losses observed at the very first optimization step, kept so
/// the assembled training loss can be cross-checked against the analytic
/// combination of its parts. Terms a method does not use stay at zero.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Step0Breakdown {
    pub ce: f64,
    pub soft: f64,
    pub pkd: f64,
    pub gkd: f64,
    pub gkd_cls: f64,
    pub total: f64,
}

/// Everything a finished run reports. Deterministic in `(config, seed)`
/// except `wall_clock_seconds`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub role: RunRole,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    /// Student-vs-teacher behavior consistency on the test split; absent
    /// for teacher runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loyalty: Option<LoyaltyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step0: Option<Step0Breakdown>,
    /// Dropout mask entries sampled across the whole run; exactly zero
    /// when the dropout-deactivation policy is in force.
    pub dropout_draws: u64,
    pub wall_clock_seconds: f64,
}

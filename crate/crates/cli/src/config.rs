//! Run configuration: JSON schema, defaults, flag overrides, and
//! validation with per-field error paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ket_core::metrics::MetricSpec;
use ket_core::model::LambdaMode;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub conceptnet: PathBuf,
    pub vad: PathBuf,
    pub stopwords: PathBuf,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub context_length: usize,
    pub tokens_per_utterance: usize,
    pub embed_dim: usize,
    pub ff_hidden: usize,
    pub heads: usize,
    #[serde(default = "default_lambda_mode")]
    pub lambda_mode: String,
    #[serde(default = "default_lambda_value")]
    pub lambda_value: f64,
}

fn default_lambda_mode() -> String {
    "learned".to_string()
}

fn default_lambda_value() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
}

fn default_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}
fn default_seed() -> u64 {
    42
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_min_freq() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: ModelSection,
    #[serde(default = "default_training")]
    pub training: TrainingSection,
    pub classes: Vec<String>,
    pub majority_class: String,
    pub metric: MetricSpec,
    #[serde(default = "default_knowledge_fraction")]
    pub knowledge_fraction: f64,
}

fn default_training() -> TrainingSection {
    TrainingSection {
        epochs: default_epochs(),
        patience: default_patience(),
        seed: default_seed(),
        batch_size: default_batch_size(),
        learning_rate: default_learning_rate(),
        min_freq: default_min_freq(),
    }
}

fn default_knowledge_fraction() -> f64 {
    1.0
}

/// Scalar flag overrides shared by the commands; these mirror the knobs the
/// analyses vary (seed, epochs, knowledge size, lambda, context length).
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Master RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fraction of distinct concepts kept in the knowledge index, in [0, 1].
    #[arg(long)]
    pub knowledge_fraction: Option<f64>,
    /// Fix the relatedness/affectiveness tradeoff to this value in [0, 1]
    /// (switches the model to fixed-lambda mode).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of context utterances (M).
    #[arg(long)]
    pub context_length: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("config {}: {e}", path.display())]))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(vec![format!("config {}: {e}", path.display())]))
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.training.seed = seed;
        }
        if let Some(epochs) = ov.epochs {
            self.training.epochs = epochs;
        }
        if let Some(fraction) = ov.knowledge_fraction {
            self.knowledge_fraction = fraction;
        }
        if let Some(lambda) = ov.lambda {
            self.model.lambda_mode = "fixed".to_string();
            self.model.lambda_value = lambda;
        }
        if let Some(m) = ov.context_length {
            self.model.context_length = m;
        }
    }

    pub fn lambda_mode(&self) -> Result<LambdaMode, String> {
        match self.model.lambda_mode.as_str() {
            "fixed" => Ok(LambdaMode::Fixed(self.model.lambda_value)),
            "learned" => Ok(LambdaMode::Learned(self.model.lambda_value)),
            other => Err(format!(
                "model.lambda_mode: {other:?} is not \"fixed\" or \"learned\""
            )),
        }
    }

    pub fn majority_index(&self) -> Option<usize> {
        self.classes.iter().position(|c| *c == self.majority_class)
    }

    /// Collect every problem at once, each tagged with its field path.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut need_file = |field: &str, path: &Path| {
            if !path.is_file() {
                problems.push(format!("data.{field}: file not found: {}", path.display()));
            }
        };
        need_file("train", &self.data.train);
        need_file("val", &self.data.val);
        need_file("test", &self.data.test);
        need_file("conceptnet", &self.data.conceptnet);
        need_file("vad", &self.data.vad);
        need_file("stopwords", &self.data.stopwords);
        if let Some(embeddings) = &self.data.embeddings {
            need_file("embeddings", embeddings);
        }

        let m = &self.model;
        if m.embed_dim == 0 || !m.embed_dim.is_multiple_of(2) {
            problems.push(format!(
                "model.embed_dim: {} must be positive and even",
                m.embed_dim
            ));
        }
        if m.heads == 0 {
            problems.push("model.heads: must be >= 1".into());
        } else if !m.embed_dim.is_multiple_of(m.heads) {
            problems.push(format!(
                "model.heads: embed_dim {} is not divisible by {}",
                m.embed_dim, m.heads
            ));
        }
        if m.tokens_per_utterance == 0 {
            problems.push("model.tokens_per_utterance: must be >= 1".into());
        }
        if m.ff_hidden == 0 {
            problems.push("model.ff_hidden: must be >= 1".into());
        }
        if let Err(e) = self.lambda_mode() {
            problems.push(e);
        }
        if !(0.0..=1.0).contains(&m.lambda_value) {
            problems.push(format!(
                "model.lambda_value: {} outside [0, 1]",
                m.lambda_value
            ));
        }

        let t = &self.training;
        if t.epochs == 0 {
            problems.push("training.epochs: must be >= 1".into());
        }
        if t.batch_size == 0 {
            problems.push("training.batch_size: must be >= 1".into());
        }
        if !t.learning_rate.is_finite() || t.learning_rate < 0.0 {
            problems.push(format!(
                "training.learning_rate: {} must be finite and >= 0",
                t.learning_rate
            ));
        }
        if t.min_freq == 0 {
            problems.push("training.min_freq: must be >= 1".into());
        }

        if self.classes.len() < 2 {
            problems.push(format!(
                "classes: need at least 2 classes, got {}",
                self.classes.len()
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                problems.push(format!("classes: duplicate class {c:?}"));
            }
        }
        if self.majority_index().is_none() {
            problems.push(format!(
                "majority_class: {:?} is not in the class list",
                self.majority_class
            ));
        }
        if !(0.0..=1.0).contains(&self.knowledge_fraction) {
            problems.push(format!(
                "knowledge_fraction: {} outside [0, 1]",
                self.knowledge_fraction
            ));
        }
        problems
    }

    /// Compact JSON echo embedded in every artifact this CLI writes.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

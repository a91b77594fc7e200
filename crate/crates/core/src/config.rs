//! Experiment configuration: a single JSON document.
//!
//! ```json
//! {
//!   "seed": 42,
//!   "dataset": { "kind": "multiclass_gaussian", "num_classes": 10, "dim": 20,
//!                "samples_per_class": 600, "separation": 4.0, "noise_std": 1.0 },
//!   "partition": { "scheme": "noniid_shards", "num_clients": 100, "shards_per_client": 2 },
//!   "learning_rate": 0.1,
//!   "criteria": ["LD", "MW", "DS"],
//!   "score_fn": "prioritized"
//! }
//! ```
//!
//! Omitted fields take the defaults in [`defaults`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::criteria::CriterionId;
use crate::data::{BinaryUserParams, GaussianParams, PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{AggregationMode, RunSettings};
use crate::learner::{BatchSize, TrainerConfig};
use crate::scoring::{CriteriaOrdering, ScoreFunctionKind};

pub mod defaults {
    pub const LOCAL_EPOCHS: usize = 5;
    pub const CLIENT_FRACTION: f64 = 0.1;
    pub const MAX_ROUNDS: usize = 1000;
    pub const LEARNING_RATE: f64 = 0.1;
    pub const TARGETS: [f64; 4] = [0.7, 0.8, 0.9, 0.95];
    pub const DEVICE_FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
}

/// Where samples come from. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    Jsonl { path: PathBuf },
    MulticlassGaussian(GaussianParams),
    BinaryUser(BinaryUserParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 selects logistic regression.
    #[serde(default)]
    pub hidden_units: usize,
}

/// `"full"` or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchSizeConfig(pub BatchSize);

impl Serialize for BatchSizeConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(n) => s.serialize_u64(n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSizeConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Size(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Size(0) => Err(serde::de::Error::custom("batch_size must be at least 1")),
            Raw::Size(n) => Ok(BatchSizeConfig(BatchSize::Size(n as usize))),
            Raw::Name(s) if s.eq_ignore_ascii_case("full") => Ok(BatchSizeConfig(BatchSize::Full)),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "batch_size must be \"full\" or a positive integer, got \"{s}\""
            ))),
        }
    }
}

/// Which orderings a sweep runs besides its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Criteria whose singles and permutations are run.
    #[serde(default)]
    pub criteria: Vec<CriterionId>,
    #[serde(default = "yes")]
    pub singles: bool,
    #[serde(default = "yes")]
    pub permutations: bool,
    /// Extra orderings run after the generated ones.
    #[serde(default)]
    pub orderings: Vec<CriteriaOrdering>,
    #[serde(default = "default_baseline")]
    pub baseline: CriteriaOrdering,
}

fn yes() -> bool {
    true
}

fn default_baseline() -> CriteriaOrdering {
    CriteriaOrdering::single(CriterionId::DS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Defaults to user-keyed for `binary_user` data and IID otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default)]
    pub batch_size: BatchSizeConfig,
    #[serde(default = "default_client_fraction", alias = "fraction")]
    pub client_fraction: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_baseline")]
    pub criteria: CriteriaOrdering,
    #[serde(default)]
    pub score_fn: ScoreFunctionKind,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default = "default_targets")]
    pub targets: Vec<f64>,
    #[serde(default = "default_device_fractions")]
    pub device_fractions: Vec<f64>,
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_learning_rate() -> f64 {
    defaults::LEARNING_RATE
}

fn default_local_epochs() -> usize {
    defaults::LOCAL_EPOCHS
}

fn default_client_fraction() -> f64 {
    defaults::CLIENT_FRACTION
}

fn default_max_rounds() -> usize {
    defaults::MAX_ROUNDS
}

fn default_targets() -> Vec<f64> {
    defaults::TARGETS.to_vec()
}

fn default_device_fractions() -> Vec<f64> {
    defaults::DEVICE_FRACTIONS.to_vec()
}

fn unit_interval(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Relative dataset paths are
    /// resolved against `base_dir` when given.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        if let Some(base) = base_dir {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Jsonl { path } => fix(path),
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !unit_interval(self.client_fraction) {
            return Err(Error::validation(
                "client_fraction",
                format!("must lie in (0, 1], got {}", self.client_fraction),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(
                "learning_rate",
                format!("must be a positive number, got {}", self.learning_rate),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::validation("local_epochs", "must be at least 1"));
        }
        if self.targets.is_empty() {
            return Err(Error::validation("targets", "must not be empty"));
        }
        for (i, &t) in self.targets.iter().enumerate() {
            if !unit_interval(t) {
                return Err(Error::validation(format!("targets[{i}]"), format!("must lie in (0, 1], got {t}")));
            }
            if i > 0 && t <= self.targets[i - 1] {
                return Err(Error::validation("targets", "must be strictly increasing"));
            }
        }
        if self.device_fractions.is_empty() {
            return Err(Error::validation("device_fractions", "must not be empty"));
        }
        for (i, &f) in self.device_fractions.iter().enumerate() {
            if !unit_interval(f) {
                return Err(Error::validation(
                    format!("device_fractions[{i}]"),
                    format!("must lie in (0, 1], got {f}"),
                ));
            }
        }
        self.partition_spec()
            .validate()
            .map_err(|e| Error::validation("partition", e.to_string()))?;
        if let Some(n) = self.static_num_classes() {
            self.check_criteria(n)?;
        }
        if let Some(sweep) = &self.sweep {
            if let Some((i, c)) = sweep.criteria.iter().enumerate().find(|(i, c)| sweep.criteria[..*i].contains(c)) {
                return Err(Error::validation(format!("sweep.criteria[{i}]"), format!("duplicate criterion `{c}`")));
            }
        }
        Ok(())
    }

    /// Class count known without loading files.
    fn static_num_classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::MulticlassGaussian(p) => Some(p.num_classes),
            DatasetSource::BinaryUser(_) => Some(2),
            _ => None,
        }
    }

    /// Checks every criterion this config can run against the task.
    pub fn check_criteria(&self, num_classes: usize) -> Result<()> {
        let mut all: Vec<(String, CriterionId)> = self
            .criteria
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("criteria[{i}]"), c))
            .collect();
        if let Some(s) = &self.sweep {
            all.extend(s.criteria.iter().enumerate().map(|(i, &c)| (format!("sweep.criteria[{i}]"), c)));
            all.extend(s.baseline.as_slice().iter().map(|&c| ("sweep.baseline".to_string(), c)));
            for (j, o) in s.orderings.iter().enumerate() {
                all.extend(o.as_slice().iter().map(|&c| (format!("sweep.orderings[{j}]"), c)));
            }
        }
        for (field, c) in all {
            if !c.applicable(num_classes) {
                return Err(Error::validation(
                    field,
                    format!("criterion `{c}` needs a binary task, dataset has {num_classes} classes"),
                ));
            }
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        self.partition.unwrap_or_else(|| match self.dataset {
            DatasetSource::BinaryUser(_) => PartitionSpec::new(PartitionScheme::UserKeyed, 2),
            _ => PartitionSpec::new(PartitionScheme::Iid, 100),
        })
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size.0,
        }
    }

    pub fn settings(&self, ordering: CriteriaOrdering) -> RunSettings {
        RunSettings {
            trainer: self.trainer(),
            client_fraction: self.client_fraction,
            ordering,
            score: self.score_fn,
            aggregation: self.aggregation,
        }
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text, path.parent())
}

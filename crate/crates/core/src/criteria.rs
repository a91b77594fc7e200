//! Per-client criteria and their per-round cohort normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabelHistogram};
use crate::error::{Error, Result};
use crate::learner::Parameters;

/// Measurable, non-sensitive client properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CriterionId {
    /// Dataset size.
    DS,
    /// Label diversity.
    LD,
    /// Model divergence from the received global model.
    MW,
    /// Class balance (binary tasks).
    CB,
    /// Fraction of sharp samples.
    IS,
}

impl CriterionId {
    pub const ALL: [CriterionId; 5] = [
        CriterionId::DS,
        CriterionId::LD,
        CriterionId::MW,
        CriterionId::CB,
        CriterionId::IS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CriterionId::DS => "DS",
            CriterionId::LD => "LD",
            CriterionId::MW => "MW",
            CriterionId::CB => "CB",
            CriterionId::IS => "IS",
        }
    }

    /// Whether the criterion can be measured on a task with `num_classes` classes.
    pub fn applicable(self, num_classes: usize) -> bool {
        match self {
            CriterionId::CB => num_classes == 2,
            _ => true,
        }
    }

    /// Raw (unnormalized) measurement for one client.
    pub fn raw(self, obs: &ClientObservation<'_>) -> Result<f64> {
        match self {
            CriterionId::DS => Ok(raw_ds(obs)),
            CriterionId::LD => Ok(raw_ld(obs)),
            CriterionId::MW => raw_mw(obs),
            CriterionId::CB => raw_cb(obs),
            CriterionId::IS => Ok(raw_is(obs)),
        }
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CriterionId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown criterion `{s}` (expected one of DS, LD, MW, CB, IS)")))
    }
}

/// Content summary of a client's training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSummary {
    pub train_size: usize,
    pub labels: LabelHistogram,
    pub sharp_count: usize,
    pub num_classes: usize,
}

impl ShardSummary {
    pub fn of(shard: &ClientShard, num_classes: usize) -> Self {
        ShardSummary {
            train_size: shard.train.len(),
            labels: LabelHistogram::of(&shard.train, num_classes),
            sharp_count: shard.train.iter().filter(|s| s.sharp).count(),
            num_classes,
        }
    }
}

/// What the server learns from one client in one round.
#[derive(Debug, Clone, Copy)]
pub struct ClientObservation<'a> {
    pub summary: &'a ShardSummary,
    pub received_global: &'a Parameters,
    pub trained_local: &'a Parameters,
}

pub fn raw_ds(obs: &ClientObservation<'_>) -> f64 {
    obs.summary.train_size as f64
}

pub fn raw_ld(obs: &ClientObservation<'_>) -> f64 {
    obs.summary.labels.distinct() as f64
}

/// `1 / sqrt(||global - local||_2 + 1)`.
pub fn raw_mw(obs: &ClientObservation<'_>) -> Result<f64> {
    let dist = obs.received_global.distance(obs.trained_local)?;
    Ok(1.0 / (dist + 1.0).sqrt())
}

/// `min(#pos, #neg) / max(#pos, #neg)` with label 1 as the positive class.
pub fn raw_cb(obs: &ClientObservation<'_>) -> Result<f64> {
    let s = obs.summary;
    if s.num_classes != 2 {
        return Err(Error::Config(format!(
            "class balance needs a binary task, got {} classes",
            s.num_classes
        )));
    }
    let neg = s.labels.counts.first().copied().unwrap_or(0);
    let pos = s.labels.counts.get(1).copied().unwrap_or(0);
    let (lo, hi) = (neg.min(pos), neg.max(pos));
    Ok(if hi == 0 { 0.0 } else { lo as f64 / hi as f64 })
}

pub fn raw_is(obs: &ClientObservation<'_>) -> f64 {
    let s = obs.summary;
    if s.train_size == 0 {
        0.0
    } else {
        s.sharp_count as f64 / s.train_size as f64
    }
}

/// Normalized criterion satisfactions of one client, in priority order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CriteriaVector(pub Vec<f64>);

impl CriteriaVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Scales one criterion's raw values over the cohort so they sum to 1.
/// An all-zero cohort falls back to uniform shares.
pub fn normalize_cohort(raws: &[f64]) -> Result<Vec<f64>> {
    if raws.is_empty() {
        return Err(Error::Internal("cannot normalize an empty cohort".into()));
    }
    if let Some(bad) = raws.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::Internal(format!(
            "criterion raw values must be finite and non-negative, got {bad}"
        )));
    }
    let total: f64 = raws.iter().sum();
    if total == 0.0 {
        let share = 1.0 / raws.len() as f64;
        return Ok(vec![share; raws.len()]);
    }
    Ok(raws.iter().map(|r| r / total).collect())
}

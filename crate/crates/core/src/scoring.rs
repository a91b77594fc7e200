//! Score functions over criteria vectors and the resulting aggregation weights.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::criteria::{CriteriaVector, CriterionId};
use crate::error::{Error, Result};

/// Criteria listed from highest to lowest priority.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<CriterionId>", into = "Vec<CriterionId>")]
pub struct CriteriaOrdering(Vec<CriterionId>);

impl CriteriaOrdering {
    pub fn new(criteria: Vec<CriterionId>) -> Result<Self> {
        if criteria.is_empty() {
            return Err(Error::Usage("criteria ordering must not be empty".into()));
        }
        for (i, c) in criteria.iter().enumerate() {
            if criteria[..i].contains(c) {
                return Err(Error::Usage(format!("duplicate criterion `{c}` in ordering")));
            }
        }
        Ok(CriteriaOrdering(criteria))
    }

    pub fn single(c: CriterionId) -> Self {
        CriteriaOrdering(vec![c])
    }

    pub fn as_slice(&self) -> &[CriterionId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stable identifier such as `DS-LD-MW`.
    pub fn id(&self) -> String {
        self.0.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("-")
    }
}

impl TryFrom<Vec<CriterionId>> for CriteriaOrdering {
    type Error = Error;

    fn try_from(v: Vec<CriterionId>) -> Result<Self> {
        CriteriaOrdering::new(v)
    }
}

impl From<CriteriaOrdering> for Vec<CriterionId> {
    fn from(o: CriteriaOrdering) -> Self {
        o.0
    }
}

impl fmt::Display for CriteriaOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFunctionKind {
    #[default]
    Prioritized,
    Mean,
}

impl ScoreFunctionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreFunctionKind::Prioritized => "prioritized",
            ScoreFunctionKind::Mean => "mean",
        }
    }

    pub fn score(self, c: &[f64]) -> Result<f64> {
        match self {
            ScoreFunctionKind::Prioritized => score_prioritized(c),
            ScoreFunctionKind::Mean => score_mean(c),
        }
    }
}

fn check_unit(c: &[f64]) -> Result<()> {
    match c.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(j) => Err(Error::Usage(format!(
            "criterion value at position {} is {}, outside [0, 1]",
            j + 1,
            c[j]
        ))),
        None => Ok(()),
    }
}

/// Prioritized score `sum_i prod_{j<=i} c_j`. A zero at position j cuts off
/// every lower-priority contribution.
pub fn score_prioritized(c: &[f64]) -> Result<f64> {
    check_unit(c)?;
    let mut prefix = 1.0;
    let mut total = 0.0;
    for &v in c {
        prefix *= v;
        total += prefix;
    }
    Ok(total)
}

/// Plain sum of the coordinates. Dividing by m would cancel in the weight
/// normalization, so the sum is returned as is.
pub fn score_mean(c: &[f64]) -> Result<f64> {
    check_unit(c)?;
    Ok(c.iter().sum())
}

/// Normalized aggregation weights for one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
    /// Normalizer Z, the sum of scores.
    pub z: f64,
    /// Set when Z was zero and uniform weights were used instead.
    pub uniform_fallback: bool,
}

/// `w_a = f(c_a) / Z` with `Z = sum_a f(c_a)`. Each vector must already be
/// arranged in priority order. Falls back to uniform weights when Z = 0.
pub fn compute_weights(vectors: &[CriteriaVector], kind: ScoreFunctionKind) -> Result<WeightVector> {
    let Some(first) = vectors.first() else {
        return Err(Error::Internal("cannot weight an empty cohort".into()));
    };
    let m = first.as_slice().len();
    if let Some(v) = vectors.iter().find(|v| v.as_slice().len() != m) {
        return Err(Error::Usage(format!(
            "criteria vectors differ in length ({} vs {m})",
            v.as_slice().len()
        )));
    }
    let scores = vectors
        .iter()
        .map(|v| kind.score(v.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let z: f64 = scores.iter().sum();
    let n = scores.len();
    if z == 0.0 {
        log::warn!("all {n} cohort scores are zero; using uniform weights");
        return Ok(WeightVector {
            weights: vec![1.0 / n as f64; n],
            scores,
            z,
            uniform_fallback: true,
        });
    }
    // Scores that already sum to 1 up to rounding are kept bit-for-bit, so a
    // lone DS criterion yields exactly n_a / sum(n).
    let weights = if (z - 1.0).abs() <= n as f64 * f64::EPSILON {
        scores.clone()
    } else {
        scores.iter().map(|s| s / z).collect()
    };
    Ok(WeightVector {
        weights,
        scores,
        z,
        uniform_fallback: false,
    })
}

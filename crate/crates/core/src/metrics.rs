//! Round records and the evaluation protocol built on them: weighted global
//! accuracy, rounds-to-target tables, gains over a baseline and joint
//! correctness counts. Also the CSV renderings of each.

use std::fmt::Write as _;

use serde::Serialize;

use crate::criteria::CriteriaVector;
use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::learner::Parameters;
use crate::scoring::WeightVector;

/// Slack for `ceil(fraction * n)` so that e.g. `0.7 * 10` asks for 7 devices.
const FRACTION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeviceAccuracy {
    pub client: ClientId,
    pub correct: usize,
    pub test_size: usize,
}

impl DeviceAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.test_size as f64
    }
}

/// Everything one communication round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub cohort: Vec<ClientId>,
    /// Raw criteria per cohort client, in priority order.
    pub raw_criteria: Vec<Vec<f64>>,
    pub criteria: Vec<CriteriaVector>,
    pub weights: WeightVector,
    /// Every client with a non-empty test set, ascending by id.
    pub devices: Vec<DeviceAccuracy>,
    pub global_accuracy: f64,
    /// Global model after aggregation.
    pub global_params: Parameters,
}

impl RoundRecord {
    pub fn new(
        round: usize,
        cohort: Vec<ClientId>,
        raw_criteria: Vec<Vec<f64>>,
        criteria: Vec<CriteriaVector>,
        weights: WeightVector,
        devices: Vec<DeviceAccuracy>,
        global_params: Parameters,
    ) -> Result<Self> {
        let global_accuracy = global_accuracy(&devices)
            .ok_or_else(|| Error::Internal("round evaluated no devices".into()))?;
        Ok(RoundRecord {
            round,
            cohort,
            raw_criteria,
            criteria,
            weights,
            devices,
            global_accuracy,
            global_params,
        })
    }

    /// Whether at least `ceil(fraction * N)` devices have accuracy >= `target`.
    pub fn reached(&self, target: f64, fraction: f64) -> bool {
        let need = required_devices(fraction, self.devices.len());
        self.devices.iter().filter(|d| d.accuracy() >= target).count() >= need
    }
}

/// Test-size-weighted mean of device accuracies, `None` when no device has
/// test data. Since each accuracy is `correct / size`, this is computed as
/// pooled `sum(correct) / sum(size)`.
pub fn global_accuracy(devices: &[DeviceAccuracy]) -> Option<f64> {
    let (correct, total) = devices
        .iter()
        .filter(|d| d.test_size > 0)
        .fold((0usize, 0usize), |(c, t), d| (c + d.correct, t + d.test_size));
    (total > 0).then(|| correct as f64 / total as f64)
}

/// `ceil(fraction * n)`.
pub fn required_devices(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - FRACTION_SLACK).ceil().max(0.0) as usize).min(n)
}

/// First 1-based round at which `ceil(fraction * N)` devices reach `target`.
pub fn rounds_to_target(records: &[RoundRecord], target: f64, fraction: f64) -> Option<usize> {
    records.iter().find(|r| r.reached(target, fraction)).map(|r| r.round)
}

/// Rounds-to-target for a grid; `cells[t][f]` is `None` when never reached.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    pub targets: Vec<f64>,
    pub fractions: Vec<f64>,
    pub cells: Vec<Vec<Option<usize>>>,
}

pub fn target_table(records: &[RoundRecord], targets: &[f64], fractions: &[f64]) -> TargetTable {
    TargetTable {
        targets: targets.to_vec(),
        fractions: fractions.to_vec(),
        cells: targets
            .iter()
            .map(|&t| fractions.iter().map(|&f| rounds_to_target(records, t, f)).collect())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GainCell {
    /// `baseline - candidate` rounds; positive means the candidate is faster.
    pub gain: i64,
    /// At least one side was not reached and was replaced by `max_rounds`.
    pub substituted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainTable {
    pub targets: Vec<f64>,
    pub fractions: Vec<f64>,
    pub cells: Vec<Vec<GainCell>>,
    /// Mean gain over the fractions of each target.
    pub row_avg: Vec<f64>,
    /// Whether any cell in the row was substituted.
    pub row_flag: Vec<bool>,
}

/// Cell-wise `baseline - candidate`, unreached cells counted as `max_rounds`
/// (so a cell unreached on both sides is 0, flagged).
pub fn gain_table(baseline: &TargetTable, candidate: &TargetTable, max_rounds: usize) -> Result<GainTable> {
    if baseline.targets != candidate.targets || baseline.fractions != candidate.fractions {
        return Err(Error::Usage("gain table needs identical target/fraction grids".into()));
    }
    let cells: Vec<Vec<GainCell>> = baseline
        .cells
        .iter()
        .zip(&candidate.cells)
        .map(|(brow, crow)| {
            brow.iter()
                .zip(crow)
                .map(|(b, c)| GainCell {
                    gain: b.unwrap_or(max_rounds) as i64 - c.unwrap_or(max_rounds) as i64,
                    substituted: b.is_none() || c.is_none(),
                })
                .collect()
        })
        .collect();
    let row_avg = cells
        .iter()
        .map(|row| {
            if row.is_empty() {
                0.0
            } else {
                row.iter().map(|c| c.gain as f64).sum::<f64>() / row.len() as f64
            }
        })
        .collect();
    let row_flag = cells.iter().map(|row| row.iter().any(|c| c.substituted)).collect();
    Ok(GainTable {
        targets: baseline.targets.clone(),
        fractions: baseline.fractions.clone(),
        cells,
        row_avg,
        row_flag,
    })
}

/// Joint correctness counts of a baseline and a candidate predictor.
/// `bw_cr` reads "baseline wrong, candidate right".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ComparisonMatrix {
    pub bw_cw: usize,
    pub bw_cr: usize,
    pub br_cw: usize,
    pub br_cr: usize,
}

impl ComparisonMatrix {
    pub fn total(&self) -> usize {
        self.bw_cw + self.bw_cr + self.br_cw + self.br_cr
    }
}

pub fn comparison_matrix(baseline: &[usize], candidate: &[usize], labels: &[usize]) -> Result<ComparisonMatrix> {
    if baseline.len() != labels.len() || candidate.len() != labels.len() {
        return Err(Error::Usage(format!(
            "misaligned predictions: baseline {}, candidate {}, labels {}",
            baseline.len(),
            candidate.len(),
            labels.len()
        )));
    }
    let mut m = ComparisonMatrix::default();
    for ((&b, &c), &y) in baseline.iter().zip(candidate).zip(labels) {
        match (b == y, c == y) {
            (false, false) => m.bw_cw += 1,
            (false, true) => m.bw_cr += 1,
            (true, false) => m.br_cw += 1,
            (true, true) => m.br_cr += 1,
        }
    }
    Ok(m)
}

/// Round with the highest global accuracy; the earliest wins ties.
pub fn best_round(records: &[RoundRecord]) -> Option<&RoundRecord> {
    records
        .iter()
        .fold(None, |best: Option<&RoundRecord>, r| match best {
            Some(b) if b.global_accuracy >= r.global_accuracy => Some(b),
            _ => Some(r),
        })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const TRACE_HEADER: &str = "round,experiment_id,global_accuracy";
pub const DEVICE_HEADER: &str = "round,client_id,accuracy,test_size";
pub const TARGET_HEADER: &str = "experiment_id,target,fraction,rounds";
pub const GAIN_HEADER: &str = "candidate_id,target,fraction,gain,avg_flag";
pub const COMPARISON_HEADER: &str = "candidate_id,bw_cw,bw_cr,br_cw,br_cr";

/// Rows ordered by round, then by the order of `runs`.
pub fn trace_csv(runs: &[(&str, &[RoundRecord])]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    let max_len = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    for i in 0..max_len {
        for (id, records) in runs {
            if let Some(r) = records.get(i) {
                writeln!(out, "{},{id},{:.6}", r.round, r.global_accuracy).unwrap();
            }
        }
    }
    out
}

pub fn device_accuracy_csv(records: &[RoundRecord]) -> String {
    let mut out = format!("{DEVICE_HEADER}\n");
    for r in records {
        for d in &r.devices {
            writeln!(out, "{},{},{:.6},{}", r.round, d.client, d.accuracy(), d.test_size).unwrap();
        }
    }
    out
}

pub fn target_csv(tables: &[(&str, &TargetTable)]) -> String {
    let mut out = format!("{TARGET_HEADER}\n");
    for (id, t) in tables {
        for (ti, target) in t.targets.iter().enumerate() {
            for (fi, fraction) in t.fractions.iter().enumerate() {
                let rounds = t.cells[ti][fi].map_or_else(|| "NR".to_string(), |r| r.to_string());
                writeln!(out, "{id},{target:.6},{fraction:.6},{rounds}").unwrap();
            }
        }
    }
    out
}

/// One row per cell (integer gain, flag = substituted) followed by one
/// `fraction = avg` row per target (mean gain, flag = any cell substituted).
pub fn gain_csv(tables: &[(&str, &GainTable)]) -> String {
    let mut out = format!("{GAIN_HEADER}\n");
    for (id, g) in tables {
        for (ti, target) in g.targets.iter().enumerate() {
            for (fi, fraction) in g.fractions.iter().enumerate() {
                let c = g.cells[ti][fi];
                writeln!(out, "{id},{target:.6},{fraction:.6},{},{}", c.gain, u8::from(c.substituted)).unwrap();
            }
            writeln!(out, "{id},{target:.6},avg,{:.6},{}", g.row_avg[ti], u8::from(g.row_flag[ti])).unwrap();
        }
    }
    out
}

pub fn comparison_csv(rows: &[(&str, ComparisonMatrix)]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for (id, m) in rows {
        writeln!(out, "{id},{},{},{},{}", m.bw_cw, m.bw_cr, m.br_cw, m.br_cr).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(client: usize, correct: usize, test_size: usize) -> DeviceAccuracy {
        DeviceAccuracy {
            client: ClientId(client),
            correct,
            test_size,
        }
    }

    fn record(round: usize, devices: Vec<DeviceAccuracy>) -> RoundRecord {
        RoundRecord::new(
            round,
            vec![],
            vec![],
            vec![],
            WeightVector {
                weights: vec![],
                scores: vec![],
                z: 0.0,
                uniform_fallback: false,
            },
            devices,
            Parameters::from_vec(vec![]),
        )
        .unwrap()
    }

    #[test]
    fn weighted_global_accuracy() {
        assert_eq!(global_accuracy(&[dev(0, 3, 3), dev(1, 0, 1)]), Some(0.75));
        // Equal sizes: plain mean.
        assert_eq!(global_accuracy(&[dev(0, 1, 4), dev(1, 3, 4)]), Some(0.5));
        assert_eq!(global_accuracy(&[]), None);
    }

    #[test]
    fn device_threshold_uses_ceiling() {
        assert_eq!(required_devices(0.7, 10), 7);
        assert_eq!(required_devices(0.5, 5), 3);
        assert_eq!(required_devices(1.0, 4), 4);
        assert_eq!(required_devices(0.1, 100), 10);
    }

    #[test]
    fn all_perfect_from_round_one() {
        let recs: Vec<_> = (1..=3).map(|r| record(r, vec![dev(0, 5, 5), dev(1, 2, 2)])).collect();
        for t in [0.5, 0.9, 1.0] {
            for f in [0.1, 0.5, 1.0] {
                assert_eq!(rounds_to_target(&recs, t, f), Some(1));
            }
        }
    }

    #[test]
    fn never_reached() {
        let recs: Vec<_> = (1..=4).map(|r| record(r, vec![dev(0, 1, 2), dev(1, 2, 2)])).collect();
        assert_eq!(rounds_to_target(&recs, 0.9, 1.0), None);
        assert_eq!(rounds_to_target(&recs, 0.9, 0.5), Some(1));
    }

    fn table(cells: Vec<Vec<Option<usize>>>) -> TargetTable {
        TargetTable {
            targets: vec![0.7],
            fractions: (0..cells[0].len()).map(|i| (i + 1) as f64 / 10.0).collect(),
            cells,
        }
    }

    #[test]
    fn gains() {
        let base = table(vec![vec![Some(5), Some(58), None]]);
        let cand = table(vec![vec![Some(4), None, None]]);
        let g = gain_table(&base, &cand, 100).unwrap();
        assert_eq!(g.cells[0][0], GainCell { gain: 1, substituted: false });
        assert_eq!(g.cells[0][1], GainCell { gain: -42, substituted: true });
        assert_eq!(g.cells[0][2], GainCell { gain: 0, substituted: true });
        assert!((g.row_avg[0] - (-41.0 / 3.0)).abs() < 1e-12);
        assert!(g.row_flag[0]);

        let zero = gain_table(&base, &base, 100).unwrap();
        assert!(zero.cells[0].iter().all(|c| c.gain == 0));

        let other = TargetTable {
            targets: vec![0.8],
            ..base.clone()
        };
        assert!(matches!(gain_table(&base, &other, 100), Err(Error::Usage(_))));
    }

    #[test]
    fn comparison_counts() {
        let labels = [0, 1, 2, 3];
        let m = comparison_matrix(&labels, &labels, &labels).unwrap();
        assert_eq!(m, ComparisonMatrix { br_cr: 4, ..Default::default() });
        let m = comparison_matrix(&labels, &[1, 2, 3, 0], &labels).unwrap();
        assert_eq!(m, ComparisonMatrix { br_cw: 4, ..Default::default() });
        assert!(comparison_matrix(&[0], &[0, 1], &[0, 1]).is_err());
    }

    #[test]
    fn csv_shapes() {
        let recs = vec![record(1, vec![dev(0, 1, 3), dev(2, 2, 2)])];
        assert_eq!(
            device_accuracy_csv(&recs),
            "round,client_id,accuracy,test_size\n1,0,0.333333,3\n1,2,1.000000,2\n"
        );
        assert_eq!(trace_csv(&[("DS", &recs)]), "round,experiment_id,global_accuracy\n1,DS,0.600000\n");
        let t = table(vec![vec![Some(3), None]]);
        assert_eq!(
            target_csv(&[("DS", &t)]),
            "experiment_id,target,fraction,rounds\nDS,0.700000,0.100000,3\nDS,0.700000,0.200000,NR\n"
        );
        let g = gain_table(&t, &t, 10).unwrap();
        assert_eq!(
            gain_csv(&[("LD", &g)]),
            "candidate_id,target,fraction,gain,avg_flag\nLD,0.700000,0.100000,0,0\nLD,0.700000,0.200000,0,1\nLD,0.700000,avg,0.000000,1\n"
        );
        let m = ComparisonMatrix { bw_cw: 1, bw_cr: 2, br_cw: 3, br_cr: 4 };
        assert_eq!(comparison_csv(&[("LD", m)]), "candidate_id,bw_cw,bw_cr,br_cw,br_cr\nLD,1,2,3,4\n");
    }

    #[test]
    fn best_round_prefers_earliest_max() {
        let recs = vec![
            record(1, vec![dev(0, 1, 2)]),
            record(2, vec![dev(0, 2, 2)]),
            record(3, vec![dev(0, 2, 2)]),
        ];
        assert_eq!(best_round(&recs).unwrap().round, 2);
        assert!(best_round(&[]).is_none());
    }
}

mod common;

use fedprio::criteria::CriteriaVector;
use fedprio::data::ClientId;
use fedprio::learner::Parameters;
use fedprio::metrics::{
    comparison_matrix, gain_table, global_accuracy, rounds_to_target, target_table, DeviceAccuracy, RoundRecord,
};
use fedprio::scoring::WeightVector;
use rand::Rng;

fn record(round: usize, devices: Vec<DeviceAccuracy>) -> RoundRecord {
    RoundRecord::new(
        round,
        vec![ClientId(0)],
        vec![vec![1.0]],
        vec![CriteriaVector(vec![1.0])],
        WeightVector {
            weights: vec![1.0],
            scores: vec![1.0],
            z: 1.0,
            uniform_fallback: false,
        },
        devices,
        Parameters::from_vec(vec![0.0]),
    )
    .unwrap()
}

fn devices_from(accuracies: &[(usize, usize)]) -> Vec<DeviceAccuracy> {
    accuracies
        .iter()
        .enumerate()
        .map(|(i, &(correct, test_size))| DeviceAccuracy {
            client: ClientId(i),
            correct,
            test_size,
        })
        .collect()
}

#[test]
fn global_accuracy_is_pooled_ratio() {
    let mut rng = common::rng(1);
    for _ in 0..100 {
        let devs: Vec<(usize, usize)> = (0..20)
            .map(|_| {
                let n = rng.random_range(1..50);
                (rng.random_range(0..=n), n)
            })
            .collect();
        let correct: usize = devs.iter().map(|d| d.0).sum();
        let total: usize = devs.iter().map(|d| d.1).sum();
        assert_eq!(global_accuracy(&devices_from(&devs)), Some(correct as f64 / total as f64));
    }
    assert_eq!(global_accuracy(&devices_from(&[(3, 3), (0, 1)])), Some(0.75));
    assert_eq!(global_accuracy(&[]), None);
}

/// Three rounds, four devices, each with 10 test samples; accuracies
/// listed per round.
const TRACE: [[usize; 4]; 3] = [[5, 9, 2, 7], [8, 6, 7, 10], [9, 9, 4, 10]];

#[test]
fn rounds_to_target_matches_exhaustive_scan() {
    let records: Vec<RoundRecord> = TRACE
        .iter()
        .enumerate()
        .map(|(r, row)| record(r + 1, devices_from(&row.map(|c| (c, 10)))))
        .collect();
    let targets = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let fractions = [0.1, 0.25, 0.5, 0.75, 1.0];
    for &t in &targets {
        for &f in &fractions {
            let need = (f * 4.0_f64).ceil() as usize;
            let scan = TRACE
                .iter()
                .position(|row| row.iter().filter(|&&c| c as f64 / 10.0 >= t).count() >= need)
                .map(|i| i + 1);
            assert_eq!(rounds_to_target(&records, t, f), scan, "target {t} fraction {f}");
        }
    }
    // Spot values worked by hand.
    assert_eq!(rounds_to_target(&records, 0.7, 0.75), Some(2));
    assert_eq!(rounds_to_target(&records, 0.9, 1.0), None);
    assert_eq!(rounds_to_target(&records, 0.9, 0.5), Some(3));
    let table = target_table(&records, &targets, &fractions);
    for row in &table.cells {
        for w in row.windows(2) {
            assert!(w[0].unwrap_or(usize::MAX) <= w[1].unwrap_or(usize::MAX));
        }
    }
}

#[test]
fn gains_follow_the_substitution_rule() {
    let rec = |accs: &[usize]| record(1, devices_from(&accs.iter().map(|&c| (c, 10)).collect::<Vec<_>>()));
    let base = target_table(&[rec(&[10, 10])], &[0.9], &[0.5, 1.0]);
    let zero = gain_table(&base, &base, 100).unwrap();
    assert!(zero.cells.iter().flatten().all(|c| c.gain == 0 && !c.substituted));

    let mut b = base.clone();
    let mut c = base.clone();
    b.cells = vec![vec![Some(5), Some(58)]];
    c.cells = vec![vec![Some(4), None]];
    let g = gain_table(&b, &c, 100).unwrap();
    assert_eq!(g.cells[0][0].gain, 1);
    assert_eq!(g.cells[0][1].gain, -42);
    assert!(g.cells[0][1].substituted && g.row_flag[0]);
    assert!((g.row_avg[0] - (-20.5)).abs() < 1e-12);
    let swapped = gain_table(&c, &b, 100).unwrap();
    assert_eq!(swapped.cells[0][1].gain, 42);

    let mut other = base.clone();
    other.fractions = vec![0.5, 0.9];
    assert!(gain_table(&base, &other, 100).is_err());
}

#[test]
fn comparison_matrix_matches_hand_count() {
    let mut rng = common::rng(3);
    let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let base: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let cand: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let mut counts = [0usize; 4];
    for i in 0..50 {
        let cell = 2 * usize::from(base[i] == labels[i]) + usize::from(cand[i] == labels[i]);
        counts[cell] += 1;
    }
    let m = comparison_matrix(&base, &cand, &labels).unwrap();
    assert_eq!([m.bw_cw, m.bw_cr, m.br_cw, m.br_cr], counts);
    assert_eq!(m.total(), 50);

    let same = comparison_matrix(&base, &base, &labels).unwrap();
    assert_eq!((same.bw_cr, same.br_cw), (0, 0));
    let wrong: Vec<usize> = labels.iter().map(|l| (l + 1) % 4).collect();
    let split = comparison_matrix(&labels, &wrong, &labels).unwrap();
    assert_eq!(split.br_cw, 50);
    assert!(comparison_matrix(&base[..10], &cand, &labels).is_err());
}

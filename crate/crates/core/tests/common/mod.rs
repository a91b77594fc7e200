//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use fedprio::config::ExperimentConfig;
use fedprio::data::{ClientId, ClientShard, Sample};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_samples<R: Rng>(rng: &mut R, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            Sample::new(x, rng.random_range(0..classes))
        })
        .collect()
}

pub fn random_clients<R: Rng>(rng: &mut R, n: usize, dim: usize, classes: usize) -> Vec<ClientShard> {
    (0..n)
        .map(|id| {
            let train_n = rng.random_range(3..25);
            let test_n = rng.random_range(1..8);
            ClientShard {
                id: ClientId(id),
                train: random_samples(rng, train_n, dim, classes),
                test: random_samples(rng, test_n, dim, classes),
                user: None,
            }
        })
        .collect()
}

/// Configuration used for the desk-scale non-IID sweep.
pub fn noniid_sweep_config() -> ExperimentConfig {
    ExperimentConfig::from_json(include_str!("../../../../configs/noniid_sweep.json"), None).unwrap()
}

/// Configuration used for the binary user-keyed imbalance check.
pub fn binary_users_config() -> ExperimentConfig {
    ExperimentConfig::from_json(include_str!("../../../../configs/binary_users.json"), None).unwrap()
}

/// Plain scalar-loop softmax regression used as an independent reference.
/// Layout: `W[k][d]` row-major followed by `b[k]`.
pub mod reference {
    use fedprio::data::Sample;

    pub fn logits(theta: &[f64], d: usize, k: usize, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; k];
        for c in 0..k {
            let mut acc = theta[k * d + c];
            for j in 0..d {
                acc += theta[c * d + j] * x[j];
            }
            z[c] = acc;
        }
        z
    }

    pub fn softmax(z: &[f64]) -> Vec<f64> {
        let mut m = f64::NEG_INFINITY;
        for &v in z {
            if v > m {
                m = v;
            }
        }
        let mut e = vec![0.0; z.len()];
        let mut s = 0.0;
        for i in 0..z.len() {
            e[i] = (z[i] - m).exp();
            s += e[i];
        }
        for v in e.iter_mut() {
            *v /= s;
        }
        e
    }

    /// One full-batch gradient step.
    pub fn step(theta: &mut [f64], d: usize, k: usize, data: &[Sample], lr: f64) {
        let mut g = vec![0.0; theta.len()];
        for s in data {
            let mut p = softmax(&logits(theta, d, k, &s.features));
            p[s.label] -= 1.0;
            for c in 0..k {
                for j in 0..d {
                    g[c * d + j] += p[c] * s.features[j];
                }
                g[k * d + c] += p[c];
            }
        }
        let n = data.len() as f64;
        for i in 0..theta.len() {
            theta[i] -= lr * (g[i] / n);
        }
    }

    pub fn train(theta: &[f64], d: usize, k: usize, data: &[Sample], lr: f64, epochs: usize) -> Vec<f64> {
        let mut t = theta.to_vec();
        for _ in 0..epochs {
            step(&mut t, d, k, data, lr);
        }
        t
    }
}

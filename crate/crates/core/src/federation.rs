//! Round orchestration: cohort selection, local training, criteria collection,
//! weighting and aggregation.
//!
//! Every random draw is keyed by `(seed, round)` or `(seed, round, client)`,
//! so the cohort schedule and local training streams are identical across
//! runs that differ only in their weighting scheme. Client work inside a
//! round runs in parallel and is collected in cohort order before the
//! barrier (normalization and aggregation), which keeps results bit-exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{normalize_cohort, ClientObservation, CriteriaVector, ShardSummary};
use crate::data::{ClientId, ClientShard};
use crate::error::{Error, Result};
use crate::learner::{count_correct, local_train, loss_and_gradient, ModelSpec, Parameters, TrainerConfig};
use crate::metrics::{DeviceAccuracy, RoundRecord};
use crate::rng::{derive_seed, rng_from, Stream};
use crate::scoring::{compute_weights, CriteriaOrdering, ScoreFunctionKind};

/// Which quantity clients send back to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Clients train locally and return Θ_a; the server sets Θ = Σ w_a Θ_a.
    #[default]
    ModelAverage,
    /// Clients return ∇G(Θ) on their full training split; the server sets
    /// Θ = Θ − α Σ w_a ∇G_a.
    Gradient,
}

/// Everything that shapes a round besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub trainer: TrainerConfig,
    pub client_fraction: f64,
    pub ordering: CriteriaOrdering,
    pub score: ScoreFunctionKind,
    pub aggregation: AggregationMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    /// 1-based index of the round this plan is for.
    pub round: usize,
    /// Selected clients, ascending by id.
    pub cohort: Vec<ClientId>,
}

/// `max(1, floor(fraction * n))`. The small slack keeps products such as
/// `0.29 * 100` from flooring one short.
pub fn cohort_size(num_clients: usize, fraction: f64) -> usize {
    ((fraction * num_clients as f64 + 1e-9).floor() as usize).clamp(1, num_clients.max(1))
}

/// Uniform sample without replacement of `cohort_size(|ids|, fraction)` ids.
pub fn select_cohort(ids: &[ClientId], fraction: f64, round: usize, round_seed: u64) -> Result<RoundPlan> {
    if ids.is_empty() {
        return Err(Error::Config("no clients to select from".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("client fraction must lie in (0, 1], got {fraction}")));
    }
    let k = cohort_size(ids.len(), fraction);
    let mut cohort: Vec<ClientId> = rand::seq::index::sample(&mut rng_from(round_seed), ids.len(), k)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    cohort.sort_unstable();
    Ok(RoundPlan { round, cohort })
}

/// Per-client result of the parallel phase of a round.
struct ClientUpdate {
    id: ClientId,
    local: Parameters,
    gradient: Option<Parameters>,
    raws: Vec<f64>,
}

/// Server state: global model, population and round counter.
#[derive(Debug, Clone)]
pub struct Federation {
    spec: ModelSpec,
    clients: Vec<ClientShard>,
    summaries: Vec<ShardSummary>,
    global: Parameters,
    round: usize,
    seed: u64,
}

impl Federation {
    /// Builds a federation with parameters initialized from `seed`. Clients
    /// with an empty training split are dropped here, once.
    pub fn new(spec: ModelSpec, clients: Vec<ClientShard>, seed: u64) -> Result<Self> {
        let init = Parameters::init(&spec, derive_seed(seed, Stream::Init, 0, 0));
        Self::with_params(spec, clients, seed, init)
    }

    pub fn with_params(spec: ModelSpec, clients: Vec<ClientShard>, seed: u64, global: Parameters) -> Result<Self> {
        spec.validate()?;
        if global.len() != spec.param_count() {
            return Err(Error::Config(format!(
                "initial parameters have length {}, model expects {}",
                global.len(),
                spec.param_count()
            )));
        }
        let before = clients.len();
        let mut clients: Vec<ClientShard> = clients.into_iter().filter(|c| !c.train.is_empty()).collect();
        if clients.len() < before {
            log::warn!("excluded {} clients with empty training splits", before - clients.len());
        }
        if clients.is_empty() {
            return Err(Error::Config("federation has no clients with training data".into()));
        }
        clients.sort_by_key(|c| c.id);
        if clients.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Config("client ids must be unique".into()));
        }
        if clients.iter().all(|c| c.test.is_empty()) {
            return Err(Error::Config("no client holds test samples".into()));
        }
        for c in &clients {
            if let Some(s) = c.train.iter().chain(&c.test).find(|s| s.label >= spec.num_classes || s.features.len() != spec.input_dim) {
                return Err(Error::Config(format!(
                    "client {}: sample with label {} and {} features does not fit model ({} classes, {} inputs)",
                    c.id,
                    s.label,
                    s.features.len(),
                    spec.num_classes,
                    spec.input_dim
                )));
            }
        }
        let summaries = clients.iter().map(|c| ShardSummary::of(c, spec.num_classes)).collect();
        Ok(Federation {
            spec,
            clients,
            summaries,
            global,
            round: 0,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn global(&self) -> &Parameters {
        &self.global
    }

    pub fn clients(&self) -> &[ClientShard] {
        &self.clients
    }

    /// Number of completed rounds.
    pub fn round_index(&self) -> usize {
        self.round
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.clients.iter().map(|c| c.id).collect()
    }

    /// Seed of the cohort draw for 1-based `round`.
    pub fn cohort_seed(seed: u64, round: usize) -> u64 {
        derive_seed(seed, Stream::Cohort, round as u64, 0)
    }

    /// Seed of a client's local training stream in 1-based `round`.
    pub fn client_seed(seed: u64, round: usize, client: ClientId) -> u64 {
        derive_seed(seed, Stream::LocalTrain, round as u64, client.0 as u64)
    }

    /// Cohort for the next round.
    pub fn plan_round(&self, fraction: f64) -> Result<RoundPlan> {
        let round = self.round + 1;
        select_cohort(&self.client_ids(), fraction, round, Self::cohort_seed(self.seed, round))
    }

    fn position(&self, id: ClientId) -> Result<usize> {
        self.clients
            .binary_search_by_key(&id, |c| c.id)
            .map_err(|_| Error::Internal(format!("client {id} is not part of the federation")))
    }

    fn client_update(&self, idx: usize, round: usize, settings: &RunSettings) -> Result<ClientUpdate> {
        let shard = &self.clients[idx];
        let (local, gradient) = match settings.aggregation {
            AggregationMode::ModelAverage => {
                let seed = Self::client_seed(self.seed, round, shard.id);
                let local = local_train(&self.global, &self.spec, &shard.train, &settings.trainer, seed)?;
                (local, None)
            }
            AggregationMode::Gradient => {
                let (_, g) = loss_and_gradient(&self.global, &self.spec, &shard.train)?;
                let lr = settings.trainer.learning_rate;
                let local = self
                    .global
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(t, gi)| t - lr * gi)
                    .collect();
                (Parameters::from_vec(local), Some(g))
            }
        };
        if !local.is_finite() || gradient.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::NonFinite { client: shard.id });
        }
        let obs = ClientObservation {
            summary: &self.summaries[idx],
            received_global: &self.global,
            trained_local: &local,
        };
        let raws = settings
            .ordering
            .as_slice()
            .iter()
            .map(|c| c.raw(&obs))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClientUpdate {
            id: shard.id,
            local,
            gradient,
            raws,
        })
    }

    /// Executes one round on `plan` and advances the global model.
    pub fn run_round(&mut self, plan: &RoundPlan, settings: &RunSettings) -> Result<RoundRecord> {
        let round = self.round + 1;
        self.execute_round(plan, settings, round)
            .map_err(|e| Error::Round {
                round,
                source: Box::new(e),
            })
    }

    fn execute_round(&mut self, plan: &RoundPlan, settings: &RunSettings, round: usize) -> Result<RoundRecord> {
        if plan.cohort.is_empty() {
            return Err(Error::Internal("empty cohort".into()));
        }
        if plan.round != round {
            return Err(Error::Internal(format!(
                "plan is for round {}, federation is at round {round}",
                plan.round
            )));
        }
        if plan.cohort.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Internal("cohort must be strictly ascending by client id".into()));
        }
        let positions = plan
            .cohort
            .iter()
            .map(|&id| self.position(id))
            .collect::<Result<Vec<_>>>()?;

        let updates = positions
            .par_iter()
            .map(|&idx| self.client_update(idx, round, settings))
            .collect::<Result<Vec<_>>>()?;

        // Barrier: normalize each criterion over the cohort.
        let m = settings.ordering.len();
        let mut criteria = vec![CriteriaVector(Vec::with_capacity(m)); updates.len()];
        for j in 0..m {
            let raws: Vec<f64> = updates.iter().map(|u| u.raws[j]).collect();
            for (vec, c) in criteria.iter_mut().zip(normalize_cohort(&raws)?) {
                vec.0.push(c);
            }
        }
        let weights = compute_weights(&criteria, settings.score)?;

        let mut next = vec![0.0; self.global.len()];
        match settings.aggregation {
            AggregationMode::ModelAverage => {
                for (u, &w) in updates.iter().zip(&weights.weights) {
                    for (acc, t) in next.iter_mut().zip(u.local.as_slice()) {
                        *acc += w * t;
                    }
                }
            }
            AggregationMode::Gradient => {
                for (u, &w) in updates.iter().zip(&weights.weights) {
                    let g = u.gradient.as_ref().expect("gradient mode keeps gradients");
                    for (acc, gi) in next.iter_mut().zip(g.as_slice()) {
                        *acc += w * gi;
                    }
                }
                let lr = settings.trainer.learning_rate;
                for (acc, t) in next.iter_mut().zip(self.global.as_slice()) {
                    *acc = t - lr * *acc;
                }
            }
        }
        let next = Parameters::from_vec(next);
        if !next.is_finite() {
            return Err(Error::Internal("aggregated global model is not finite".into()));
        }

        self.global = next;
        self.round = round;
        let devices = self.evaluate()?;
        let record = RoundRecord::new(
            round,
            updates.iter().map(|u| u.id).collect(),
            updates.into_iter().map(|u| u.raws).collect(),
            criteria,
            weights,
            devices,
            self.global.clone(),
        )?;
        log::info!(
            "round={} cohort={} z={:.6} global_accuracy={:.6}",
            record.round,
            record.cohort.len(),
            record.weights.z,
            record.global_accuracy
        );
        Ok(record)
    }

    /// Accuracy of the current global model on every client holding test data.
    pub fn evaluate(&self) -> Result<Vec<DeviceAccuracy>> {
        self.clients
            .par_iter()
            .filter(|c| !c.test.is_empty())
            .map(|c| {
                Ok(DeviceAccuracy {
                    client: c.id,
                    correct: count_correct(&self.global, &self.spec, &c.test)?,
                    test_size: c.test.len(),
                })
            })
            .collect()
    }
}

/// Stops a run once every `(target, fraction)` pair has been reached.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub targets: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// Runs up to `max_rounds` rounds from the federation's current state.
pub fn run_experiment(
    fed: &mut Federation,
    settings: &RunSettings,
    max_rounds: usize,
    early_stop: Option<&EarlyStop>,
) -> Result<Vec<RoundRecord>> {
    let mut records = Vec::with_capacity(max_rounds);
    let mut pending: Vec<(f64, f64)> = early_stop
        .map(|es| {
            es.targets
                .iter()
                .flat_map(|&t| es.fractions.iter().map(move |&f| (t, f)))
                .collect()
        })
        .unwrap_or_default();
    for _ in 0..max_rounds {
        let plan = fed.plan_round(settings.client_fraction)?;
        let record = fed.run_round(&plan, settings)?;
        if early_stop.is_some() {
            pending.retain(|&(t, f)| !record.reached(t, f));
        }
        records.push(record);
        if early_stop.is_some() && pending.is_empty() {
            break;
        }
    }
    Ok(records)
}

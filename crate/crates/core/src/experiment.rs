//! Executes configs: single runs, permutation sweeps and the learning-rate
//! grid search, plus the on-disk report layout.
//!
//! Every run of a sweep starts from the same partition, initial model and
//! cohort schedule, so the weighting scheme is the only thing that varies.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::criteria::CriterionId;
use crate::data::{self, infer_num_classes, synth_generate, ClientShard, Sample, SynthKind};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, EarlyStop, Federation};
use crate::learner::{predict_all, ModelSpec, Parameters};
use crate::metrics::{
    self, best_round, comparison_matrix, gain_table, target_table, ComparisonMatrix, GainTable, RoundRecord,
    TargetTable,
};
use crate::scoring::CriteriaOrdering;

/// Loaded, partitioned data and the model it implies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub clients: Vec<ClientShard>,
}

fn load_samples(source: &DatasetSource, seed: u64) -> Result<Vec<Sample>> {
    match source {
        DatasetSource::Idx { images, labels } => data::load_idx(images, labels),
        DatasetSource::Jsonl { path } => data::read_jsonl(path),
        DatasetSource::MulticlassGaussian(p) => synth_generate(&SynthKind::MulticlassGaussian(*p), seed),
        DatasetSource::BinaryUser(p) => synth_generate(&SynthKind::BinaryUser(*p), seed),
    }
}

/// Loads or generates the dataset and partitions it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let samples = load_samples(&cfg.dataset, cfg.seed)?;
    let Some(first) = samples.first() else {
        return Err(Error::validation("dataset", "dataset is empty"));
    };
    let input_dim = first.features.len();
    if let Some(i) = samples.iter().position(|s| s.features.len() != input_dim) {
        return Err(Error::validation(
            "dataset",
            format!("sample {i} has {} features, expected {input_dim}", samples[i].features.len()),
        ));
    }
    let num_classes = match cfg.dataset {
        DatasetSource::MulticlassGaussian(p) => p.num_classes,
        DatasetSource::BinaryUser(_) => 2,
        _ => infer_num_classes(&samples).max(2),
    };
    cfg.check_criteria(num_classes)?;
    let spec = ModelSpec {
        input_dim,
        num_classes,
        hidden_units: cfg.model.hidden_units,
        activation: Default::default(),
    };
    let clients = data::partition(&samples, &cfg.partition_spec(), cfg.seed)?;
    Ok(Prepared { spec, clients })
}

/// Records of one configuration.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub id: String,
    pub ordering: CriteriaOrdering,
    pub initial_params: Parameters,
    pub records: Vec<RoundRecord>,
}

impl RunOutput {
    pub fn start_hash(&self) -> String {
        hex::encode(Sha256::digest(self.initial_params.to_le_bytes()))
    }
}

fn early_stop(cfg: &ExperimentConfig) -> Option<EarlyStop> {
    cfg.early_stop.then(|| EarlyStop {
        targets: cfg.targets.clone(),
        fractions: cfg.device_fractions.clone(),
    })
}

/// Runs `ordering` on prepared data.
pub fn run_ordering(cfg: &ExperimentConfig, prepared: &Prepared, ordering: &CriteriaOrdering) -> Result<RunOutput> {
    let id = ordering.id();
    let wrap = |e: Error| Error::Run {
        run: id.clone(),
        source: Box::new(e),
    };
    let mut fed = Federation::new(prepared.spec, prepared.clients.clone(), cfg.seed).map_err(wrap)?;
    let initial_params = fed.global().clone();
    let settings = cfg.settings(ordering.clone());
    let records = run_experiment(&mut fed, &settings, cfg.max_rounds, early_stop(cfg).as_ref()).map_err(wrap)?;
    Ok(RunOutput {
        id,
        ordering: ordering.clone(),
        initial_params,
        records,
    })
}

/// Baseline first, then singles, permutations and extra orderings, with
/// duplicates dropped.
pub fn sweep_orderings(cfg: &ExperimentConfig) -> Vec<CriteriaOrdering> {
    let Some(sweep) = &cfg.sweep else {
        return vec![cfg.criteria.clone()];
    };
    let mut candidates = vec![sweep.baseline.clone()];
    if sweep.singles {
        candidates.extend(sweep.criteria.iter().map(|&c| CriteriaOrdering::single(c)));
    }
    if sweep.permutations && sweep.criteria.len() > 1 {
        candidates.extend(
            permutations(&sweep.criteria)
                .into_iter()
                .map(|p| CriteriaOrdering::new(p).expect("permutation of distinct criteria")),
        );
    }
    candidates.extend(sweep.orderings.iter().cloned());
    let mut out: Vec<CriteriaOrdering> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if out.contains(&c) {
            // A single equal to the baseline is expected; anything else is a config slip.
            if !(c == sweep.baseline && c.len() == 1 && sweep.criteria.contains(&c.as_slice()[0])) {
                log::warn!("dropping duplicate ordering {c}");
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// All orderings of `items`, in lexicographic order of positions.
fn permutations(items: &[CriterionId]) -> Vec<Vec<CriterionId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Pooled test samples of every client, in client order.
fn pooled_test(prepared: &Prepared) -> Vec<Sample> {
    prepared.clients.iter().flat_map(|c| c.test.iter().cloned()).collect()
}

fn best_predictions(run: &RunOutput, spec: &ModelSpec, pooled: &[Sample]) -> Result<Vec<usize>> {
    let params = best_round(&run.records).map_or(&run.initial_params, |r| &r.global_params);
    predict_all(params, spec, pooled)
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    seed: u64,
    start_params_sha256: String,
    criteria: Vec<&'static str>,
    score_fn: &'static str,
    num_clients: usize,
    param_count: usize,
    rounds: usize,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Everything reported about one run relative to a baseline.
struct RunReport<'a> {
    run: &'a RunOutput,
    table: TargetTable,
    gains: GainTable,
    comparison: ComparisonMatrix,
}

fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, prepared: &Prepared, r: &RunReport<'_>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut echo = cfg.clone();
    echo.criteria = r.run.ordering.clone();
    write(&dir.join("config.json"), &to_json(&echo)?)?;
    let manifest = Manifest {
        run_id: &r.run.id,
        seed: cfg.seed,
        start_params_sha256: r.run.start_hash(),
        criteria: r.run.ordering.as_slice().iter().map(|c| c.as_str()).collect(),
        score_fn: cfg.score_fn.as_str(),
        num_clients: prepared.clients.len(),
        param_count: prepared.spec.param_count(),
        rounds: r.run.records.len(),
    };
    write(&dir.join("manifest.json"), &to_json(&manifest)?)?;
    let id = r.run.id.as_str();
    write(&dir.join("trace.csv"), &metrics::trace_csv(&[(id, &r.run.records)]))?;
    write(&dir.join("device_accuracy.csv"), &metrics::device_accuracy_csv(&r.run.records))?;
    write(&dir.join("target_table.csv"), &metrics::target_csv(&[(id, &r.table)]))?;
    write(&dir.join("gain_table.csv"), &metrics::gain_csv(&[(id, &r.gains)]))?;
    write(&dir.join("comparison.csv"), &metrics::comparison_csv(&[(id, r.comparison)]))?;
    Ok(())
}

/// Outcome of a sweep: runs in execution order, the first being the baseline.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<RunOutput>,
    pub tables: Vec<TargetTable>,
    pub gains: Vec<GainTable>,
    pub comparisons: Vec<ComparisonMatrix>,
}

impl SweepOutcome {
    pub fn baseline(&self) -> &RunOutput {
        &self.runs[0]
    }
}

/// Runs every ordering of the sweep on shared data and writes reports under
/// `out_dir`: one sub-directory per run plus combined CSVs at the top.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepOutcome> {
    let prepared = prepare(cfg)?;
    let orderings = sweep_orderings(cfg);
    let runs = orderings
        .par_iter()
        .map(|o| run_ordering(cfg, &prepared, o))
        .collect::<Result<Vec<_>>>()?;
    report(cfg, &prepared, runs, out_dir)
}

/// Runs the config's own ordering; reports compare the run with itself.
pub fn run_single(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepOutcome> {
    let prepared = prepare(cfg)?;
    let run = run_ordering(cfg, &prepared, &cfg.criteria)?;
    report(cfg, &prepared, vec![run], out_dir)
}

fn report(cfg: &ExperimentConfig, prepared: &Prepared, runs: Vec<RunOutput>, out_dir: &Path) -> Result<SweepOutcome> {
    let pooled = pooled_test(prepared);
    let labels: Vec<usize> = pooled.iter().map(|s| s.label).collect();
    let tables: Vec<TargetTable> = runs
        .iter()
        .map(|r| target_table(&r.records, &cfg.targets, &cfg.device_fractions))
        .collect();
    let predictions = runs
        .par_iter()
        .map(|r| best_predictions(r, &prepared.spec, &pooled))
        .collect::<Result<Vec<_>>>()?;
    let mut gains = Vec::with_capacity(runs.len());
    let mut comparisons = Vec::with_capacity(runs.len());
    for (t, p) in tables.iter().zip(&predictions) {
        gains.push(gain_table(&tables[0], t, cfg.max_rounds)?);
        comparisons.push(comparison_matrix(&predictions[0], p, &labels)?);
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let multi = runs.len() > 1;
    for (i, run) in runs.iter().enumerate() {
        let dir = if multi { out_dir.join(&run.id) } else { out_dir.to_path_buf() };
        let rep = RunReport {
            run,
            table: tables[i].clone(),
            gains: gains[i].clone(),
            comparison: comparisons[i],
        };
        write_run_dir(&dir, cfg, prepared, &rep)?;
    }
    if multi {
        let ids: Vec<&str> = runs.iter().map(|r| r.id.as_str()).collect();
        let traces: Vec<(&str, &[RoundRecord])> =
            runs.iter().map(|r| (r.id.as_str(), r.records.as_slice())).collect();
        write(&out_dir.join("trace.csv"), &metrics::trace_csv(&traces))?;
        let t: Vec<_> = ids.iter().copied().zip(&tables).collect();
        write(&out_dir.join("target_table.csv"), &metrics::target_csv(&t))?;
        let g: Vec<_> = ids.iter().copied().zip(&gains).skip(1).collect();
        write(&out_dir.join("gain_table.csv"), &metrics::gain_csv(&g))?;
        let c: Vec<_> = ids.iter().copied().zip(comparisons.iter().copied()).skip(1).collect();
        write(&out_dir.join("comparison.csv"), &metrics::comparison_csv(&c))?;
    }
    Ok(SweepOutcome {
        runs,
        tables,
        gains,
        comparisons,
    })
}

/// One grid point of the learning-rate search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrTrial {
    pub learning_rate: f64,
    /// Rounds until half the devices reach the target, if ever.
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSearch {
    /// `None` when no grid value reached the target.
    pub chosen: Option<f64>,
    pub target: f64,
    pub trials: Vec<LrTrial>,
}

/// Device fraction the learning-rate search optimizes for.
pub const LR_SEARCH_FRACTION: f64 = 0.5;

/// Picks the learning rate whose DS-only baseline first gets half the devices
/// to `target`; ties go to the smaller rate.
pub fn grid_search_lr(cfg: &ExperimentConfig, grid: &[f64], target: f64) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::validation("grid", "must not be empty"));
    }
    if let Some(bad) = grid.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::validation("grid", format!("learning rates must be positive, got {bad}")));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::validation("target", format!("must lie in (0, 1], got {target}")));
    }
    let prepared = prepare(cfg)?;
    let baseline = CriteriaOrdering::single(CriterionId::DS);
    let trials = grid
        .par_iter()
        .map(|&lr| {
            let mut c = cfg.clone();
            c.learning_rate = lr;
            c.targets = vec![target];
            c.device_fractions = vec![LR_SEARCH_FRACTION];
            c.early_stop = true;
            let run = run_ordering(&c, &prepared, &baseline)?;
            Ok(LrTrial {
                learning_rate: lr,
                rounds: metrics::rounds_to_target(&run.records, target, LR_SEARCH_FRACTION),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chosen = trials
        .iter()
        .filter_map(|t| t.rounds.map(|r| (r, t.learning_rate)))
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .map(|(_, lr)| lr);
    Ok(LrSearch { chosen, target, trials })
}

/// Output directory: explicit flag, else the config's `output_dir`, else `fallback`.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

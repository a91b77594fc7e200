//! Samples, client shards, partitioners, IDX ingestion and synthetic datasets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Users with fewer samples than this are dropped by the user-keyed partitioner.
pub const MIN_USER_SAMPLES: usize = 5;

fn default_sharp() -> bool {
    true
}

/// One labeled example. `sharp` is image-quality metadata; `user` is the
/// owning user's key for user-keyed datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    #[serde(default = "default_sharp")]
    pub sharp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Sample {
            features,
            label,
            sharp: true,
            user: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A client's private dataset D_a, split into train and held-out test parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: ClientId,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub user: Option<String>,
}

impl ClientShard {
    /// n_a, the training set size.
    pub fn size(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    NoniidShards,
    UserKeyed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    #[serde(default = "PartitionSpec::default_num_clients")]
    pub num_clients: usize,
    #[serde(default = "PartitionSpec::default_shards_per_client")]
    pub shards_per_client: usize,
    #[serde(default = "PartitionSpec::default_holdout_ratio")]
    pub holdout_ratio: f64,
}

impl PartitionSpec {
    fn default_num_clients() -> usize {
        100
    }

    fn default_shards_per_client() -> usize {
        2
    }

    fn default_holdout_ratio() -> f64 {
        0.2
    }

    pub fn new(scheme: PartitionScheme, num_clients: usize) -> Self {
        PartitionSpec {
            scheme,
            num_clients,
            shards_per_client: Self::default_shards_per_client(),
            holdout_ratio: Self::default_holdout_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheme != PartitionScheme::UserKeyed && self.num_clients < 2 {
            return Err(Error::Config(format!(
                "num_clients must be at least 2, got {}",
                self.num_clients
            )));
        }
        if self.scheme == PartitionScheme::NoniidShards && self.shards_per_client == 0 {
            return Err(Error::Config("shards_per_client must be at least 1".into()));
        }
        if !(self.holdout_ratio > 0.0 && self.holdout_ratio < 1.0) {
            return Err(Error::Config(format!(
                "holdout_ratio must lie in (0, 1), got {}",
                self.holdout_ratio
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX3 image file. Returns `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * dim {
        return Err(Error::Format(format!(
            "images: header declares {count} images of {rows}x{cols} ({} bytes), file holds {} bytes",
            count * dim,
            body.len()
        )));
    }
    Ok((count, dim, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "labels: header declares {count} labels, file holds {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` by `/ 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, dim, pixels) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "image file holds {count} images but label file holds {} labels",
            labels.len()
        )));
    }
    Ok(pixels
        .chunks_exact(dim.max(1))
        .take(count)
        .zip(labels)
        .map(|(px, &label)| Sample::new(px.iter().map(|&p| p as f64 / 255.0).collect(), label as usize))
        .collect())
}

/// Writes an IDX3 image file from raw bytes (`count * rows * cols` of them).
pub fn write_idx_images(path: &Path, rows: u32, cols: u32, pixels: &[u8]) -> Result<()> {
    let per = (rows * cols) as usize;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Usage("pixel buffer is not a whole number of images".into()));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / per) as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON lines
// ---------------------------------------------------------------------------

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(sample);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Shuffles `samples` and moves `round(n * ratio)` of them (at most `n - 1`)
/// into the test split.
fn holdout(mut samples: Vec<Sample>, ratio: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    samples.shuffle(&mut rng_from(seed));
    let test_n = ((n as f64 * ratio).round() as usize).min(n.saturating_sub(1));
    let train = samples.split_off(test_n);
    (train, samples)
}

fn into_shards(groups: Vec<(Vec<Sample>, Option<String>)>, spec: &PartitionSpec, seed: u64) -> Vec<ClientShard> {
    groups
        .into_iter()
        .enumerate()
        .map(|(i, (samples, user))| {
            let (train, test) = holdout(samples, spec.holdout_ratio, derive_seed(seed, Stream::Holdout, i as u64, 0));
            ClientShard {
                id: ClientId(i),
                train,
                test,
                user,
            }
        })
        .collect()
}

/// Shuffles and deals `data` into `num_clients` shards whose sizes differ by
/// at most one.
pub fn partition_iid(data: &[Sample], spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let k = spec.num_clients;
    if data.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot fill {k} clients",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, Stream::Partition, 0, 0)));
    let (base, extra) = (data.len() / k, data.len() % k);
    let mut groups = Vec::with_capacity(k);
    let mut at = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        groups.push((order[at..at + len].iter().map(|&i| data[i].clone()).collect(), None));
        at += len;
    }
    Ok(into_shards(groups, spec, seed))
}

/// Label-sorted shard dealing: sort by label, cut into
/// `num_clients * shards_per_client` equal contiguous shards (remainder
/// dropped), shuffle the shards and deal `shards_per_client` to each client.
pub fn partition_noniid_shards(data: &[Sample], spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let num_shards = spec.num_clients * spec.shards_per_client;
    let shard_len = data.len() / num_shards;
    if shard_len == 0 {
        return Err(Error::Config(format!(
            "{} clients x {} shards needs at least {num_shards} samples, got {}",
            spec.num_clients,
            spec.shards_per_client,
            data.len()
        )));
    }
    let mut sorted: Vec<usize> = (0..data.len()).collect();
    sorted.sort_by_key(|&i| (data[i].label, i));
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(&mut rng_from(derive_seed(seed, Stream::Partition, 1, 0)));
    let groups = shard_ids
        .chunks(spec.shards_per_client)
        .map(|ids| {
            let samples = ids
                .iter()
                .flat_map(|&s| &sorted[s * shard_len..(s + 1) * shard_len])
                .map(|&i| data[i].clone())
                .collect();
            (samples, None)
        })
        .collect();
    Ok(into_shards(groups, spec, seed))
}

/// One shard per user key, in key order. Users with fewer than
/// [`MIN_USER_SAMPLES`] samples are dropped. `num_clients` is ignored.
pub fn partition_user_keyed(data: &[Sample], spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let mut by_user: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        let key = s
            .user
            .as_deref()
            .ok_or_else(|| Error::Config(format!("sample {i} carries no user key")))?;
        by_user.entry(key).or_default().push(s.clone());
    }
    let groups: Vec<_> = by_user
        .into_iter()
        .filter(|(_, v)| v.len() >= MIN_USER_SAMPLES)
        .map(|(k, v)| (v, Some(k.to_string())))
        .collect();
    if groups.is_empty() {
        return Err(Error::Config(format!(
            "no user has at least {MIN_USER_SAMPLES} samples"
        )));
    }
    Ok(into_shards(groups, spec, seed))
}

pub fn partition(data: &[Sample], spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    match spec.scheme {
        PartitionScheme::Iid => partition_iid(data, spec, seed),
        PartitionScheme::NoniidShards => partition_noniid_shards(data, spec, seed),
        PartitionScheme::UserKeyed => partition_user_keyed(data, spec, seed),
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Isotropic Gaussian clusters, one per class, centered on random directions
/// scaled to `separation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub noise_std: f64,
    #[serde(default = "GaussianParams::default_sharp_prob")]
    pub sharp_prob: f64,
}

impl GaussianParams {
    fn default_sharp_prob() -> f64 {
        1.0
    }
}

/// Binary task keyed by user. Each user gets a sample count, a positive-class
/// share and a sharpness probability; blurry samples carry extra noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryUserParams {
    pub num_users: usize,
    pub dim: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    pub separation: f64,
    pub noise_std: f64,
    /// Fraction of users whose positive share is drawn from the extremes
    /// `[0, 0.1] ∪ [0.9, 1]` instead of `[0.3, 0.7]`.
    pub imbalanced_fraction: f64,
    /// Probability that an imbalanced user's majority class is the positive
    /// one. Values away from 0.5 also skew the pooled label distribution.
    #[serde(default = "BinaryUserParams::default_majority_positive")]
    pub majority_positive_prob: f64,
    pub sharp_prob_min: f64,
    pub sharp_prob_max: f64,
    /// Noise multiplier applied to blurry samples.
    pub blur_noise: f64,
}

impl BinaryUserParams {
    fn default_majority_positive() -> f64 {
        0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    MulticlassGaussian(GaussianParams),
    BinaryUser(BinaryUserParams),
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn random_direction<R: Rng>(rng: &mut R, dim: usize, length: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm * length).collect();
        }
    }
}

fn noisy<R: Rng>(rng: &mut R, center: &[f64], noise: &Normal<f64>) -> Vec<f64> {
    center.iter().map(|c| c + noise.sample(rng)).collect()
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise std {std}: {e}")))
}

/// Deterministic synthetic dataset for desk-scale runs.
pub fn synth_generate(kind: &SynthKind, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = rng_from(derive_seed(seed, Stream::Synth, 0, 0));
    match *kind {
        SynthKind::MulticlassGaussian(p) => {
            if p.num_classes < 2 || p.dim == 0 || p.samples_per_class == 0 {
                return Err(Error::Config(
                    "gaussian dataset needs >= 2 classes, dim >= 1 and >= 1 sample per class".into(),
                ));
            }
            check_prob("sharp_prob", p.sharp_prob)?;
            let noise = normal(p.noise_std)?;
            let centroids: Vec<Vec<f64>> = (0..p.num_classes)
                .map(|_| random_direction(&mut rng, p.dim, p.separation))
                .collect();
            let mut out = Vec::with_capacity(p.num_classes * p.samples_per_class);
            for (label, c) in centroids.iter().enumerate() {
                for _ in 0..p.samples_per_class {
                    let mut s = Sample::new(noisy(&mut rng, c, &noise), label);
                    s.sharp = rng.random_bool(p.sharp_prob);
                    out.push(s);
                }
            }
            Ok(out)
        }
        SynthKind::BinaryUser(p) => {
            if p.num_users == 0 || p.dim == 0 || p.min_samples == 0 || p.min_samples > p.max_samples {
                return Err(Error::Config(
                    "binary_user dataset needs >= 1 user, dim >= 1 and 1 <= min_samples <= max_samples".into(),
                ));
            }
            check_prob("imbalanced_fraction", p.imbalanced_fraction)?;
            check_prob("majority_positive_prob", p.majority_positive_prob)?;
            check_prob("sharp_prob_min", p.sharp_prob_min)?;
            check_prob("sharp_prob_max", p.sharp_prob_max)?;
            if p.sharp_prob_min > p.sharp_prob_max {
                return Err(Error::Config("sharp_prob_min exceeds sharp_prob_max".into()));
            }
            let noise = normal(p.noise_std)?;
            let blurry_noise = normal(p.noise_std * p.blur_noise.max(1.0))?;
            let axis = random_direction(&mut rng, p.dim, p.separation / 2.0);
            let centers = [
                axis.iter().map(|a| -a).collect::<Vec<_>>(),
                axis.clone(),
            ];
            let width = (p.num_users - 1).to_string().len();
            let mut out = Vec::new();
            for u in 0..p.num_users {
                let user = format!("u{u:0width$}");
                let n = rng.random_range(p.min_samples..=p.max_samples);
                let pos_share = if rng.random_bool(p.imbalanced_fraction) {
                    let tail = rng.random_range(0.0..=0.1);
                    if rng.random_bool(p.majority_positive_prob) {
                        1.0 - tail
                    } else {
                        tail
                    }
                } else {
                    rng.random_range(0.3..=0.7)
                };
                let sharp_prob = rng.random_range(p.sharp_prob_min..=p.sharp_prob_max);
                for _ in 0..n {
                    let label = usize::from(rng.random_bool(pos_share));
                    let sharp = rng.random_bool(sharp_prob);
                    let dist = if sharp { &noise } else { &blurry_noise };
                    out.push(Sample {
                        features: noisy(&mut rng, &centers[label], dist),
                        label,
                        sharp,
                        user: Some(user.clone()),
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Per-class sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHistogram {
    pub counts: Vec<usize>,
}

impl LabelHistogram {
    pub fn of(samples: &[Sample], num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for s in samples {
            if s.label >= counts.len() {
                counts.resize(s.label + 1, 0);
            }
            counts[s.label] += 1;
        }
        LabelHistogram { counts }
    }

    pub fn distinct(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Number of classes implied by the largest label.
pub fn infer_num_classes(samples: &[Sample]) -> usize {
    samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
}

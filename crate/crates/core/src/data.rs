//! Datasets: synthetic Gaussian blobs, long-tail subsampling, Dirichlet
//! partitioning across clients, class grouping and the raw binary import
//! format.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::seeded;

/// Labeled samples. `sample_ids` carries each row's index in the dataset it
/// was derived from, so client shards can look up per-sample teacher output.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Array2<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    sample_ids: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(samples: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(samples, labels, class_names, ids)
    }

    pub fn with_ids(
        samples: Array2<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        sample_ids: Vec<usize>,
    ) -> Result<Self> {
        check_dim("dataset labels", samples.nrows(), labels.len())?;
        check_dim("dataset sample ids", samples.nrows(), sample_ids.len())?;
        if class_names.is_empty() {
            return Err(Error::Empty("class names"));
        }
        let distinct: BTreeSet<&String> = class_names.iter().collect();
        if distinct.len() != class_names.len() {
            return Err(Error::InvalidArgument("class names must be distinct".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: class_names.len(),
            });
        }
        Ok(Self {
            samples,
            labels,
            class_names,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    /// Number of samples of each class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices holding class `c`, in row order.
    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Subset of rows, keeping their sample ids.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            samples: self.samples.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_names: self.class_names.clone(),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
        }
    }

    /// Same rows with sample ids renumbered `0..n`.
    pub fn renumbered(mut self) -> Self {
        self.sample_ids = (0..self.labels.len()).collect();
        self
    }
}

/// Per-class sample counts sorted head to tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Empty("class counts"));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("class counts must be >= 1".into()));
        }
        if counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("class counts must be nonincreasing".into()));
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<usize>> for ClassCounts {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassCounts> for Vec<usize> {
    fn from(c: ClassCounts) -> Self {
        c.0
    }
}

/// Exponential profile `n_c = round(n_max · IF^{−c/(C−1)})` for `c = 0..C`.
pub fn make_longtail_counts(n_max: usize, num_classes: usize, imbalance_factor: f64) -> Result<ClassCounts> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "long-tail profile needs at least 2 classes, got {num_classes}"
        )));
    }
    if !(imbalance_factor >= 1.0) || !imbalance_factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "imbalance factor must be >= 1, got {imbalance_factor}"
        )));
    }
    if (n_max as f64 / imbalance_factor).round() < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "n_max / IF = {n_max} / {imbalance_factor} leaves an empty tail class"
        )));
    }
    let last = (num_classes - 1) as f64;
    let counts = (0..num_classes)
        .map(|c| {
            let scale = if c == num_classes - 1 {
                1.0 / imbalance_factor
            } else {
                imbalance_factor.powf(-(c as f64) / last)
            };
            (n_max as f64 * scale).round() as usize
        })
        .collect();
    ClassCounts::new(counts)
}

/// Keeps exactly `counts[c]` seeded-random samples of each class `c`. Output
/// rows stay in source order and keep their ids.
pub fn subsample_longtail(dataset: &LabeledDataset, counts: &ClassCounts, seed: u64) -> Result<LabeledDataset> {
    check_dim("long-tail class count", dataset.num_classes(), counts.num_classes())?;
    let mut rng = seeded(seed);
    let mut keep = Vec::with_capacity(counts.total());
    for (c, &want) in counts.as_slice().iter().enumerate() {
        let mut idx = dataset.indices_of_class(c);
        if idx.len() < want {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, {want} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..want]);
    }
    keep.sort_unstable();
    Ok(dataset.select(&keep))
}

/// Splits off `per_class` seeded-random samples of every class as a balanced
/// holdout. Returns `(rest, holdout)`; both keep source ids.
pub fn holdout_per_class(dataset: &LabeledDataset, per_class: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut rng = seeded(seed);
    let mut rest = Vec::new();
    let mut held = Vec::new();
    for c in 0..dataset.num_classes() {
        let mut idx = dataset.indices_of_class(c);
        if idx.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, cannot hold out {per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        held.extend_from_slice(&idx[..per_class]);
        rest.extend_from_slice(&idx[per_class..]);
    }
    rest.sort_unstable();
    held.sort_unstable();
    Ok((dataset.select(&rest), dataset.select(&held)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn dirichlet_proportions<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed (tiny alpha): all mass on one client
        let winner = rng.random_range(0..k);
        (0..k).map(|i| if i == winner { 1.0 } else { 0.0 }).collect()
    }
}

/// Integer counts summing exactly to `total`, by largest remainder.
/// Ties go to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Row indices of every client shard (see [`dirichlet_partition`]).
pub fn dirichlet_partition_indices(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset to partition"));
    }
    let k = spec.num_clients;
    let mut rng = seeded(spec.seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..dataset.num_classes() {
        let mut idx = dataset.indices_of_class(c);
        let props = dirichlet_proportions(spec.alpha, k, &mut rng);
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let sizes = largest_remainder(&props, idx.len());
        let mut start = 0;
        for (shard, size) in shards.iter_mut().zip(sizes) {
            shard.extend_from_slice(&idx[start..start + size]);
            start += size;
        }
    }
    // empty-client repair: move one sample from the current largest shard
    for i in 0..k {
        if shards[i].is_empty() {
            let donor = (0..k)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .expect("k >= 1");
            if shards[donor].len() < 2 {
                break;
            }
            let moved = shards[donor].pop().expect("donor nonempty");
            shards[i].push(moved);
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

/// Heterogeneous split: per class, proportions ~ Dirichlet(α·1_K), converted
/// to counts by largest remainder. The union of shards is the dataset.
pub fn dirichlet_partition(dataset: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    Ok(dirichlet_partition_indices(dataset, spec)?
        .iter()
        .map(|rows| dataset.select(rows))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    /// Norm of every class center.
    pub separation: f64,
}

impl BlobSpec {
    pub const DEFAULT_SEPARATION: f64 = 4.0;
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class_{c}")).collect()
}

/// Seeded random unit-norm class centers scaled to `separation`.
pub fn blob_centers(spec: &BlobSpec, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let mut centers = Array2::from_shape_simple_fn((spec.num_classes, spec.input_dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    for mut row in centers.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row *= spec.separation / norm;
    }
    centers
}

/// Isotropic Gaussian blobs, class-major order.
pub fn synth_blobs(spec: &BlobSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.num_classes == 0 || spec.input_dim == 0 || spec.n_per_class == 0 {
        return Err(Error::InvalidArgument("blob dimensions must be positive".into()));
    }
    if !(spec.spread >= 0.0) || !(spec.separation > 0.0) {
        return Err(Error::InvalidArgument("blob spread must be >= 0 and separation > 0".into()));
    }
    let centers = blob_centers(spec, seed);
    let mut rng = seeded(seed ^ 0x5bd1_e995);
    let n = spec.num_classes * spec.n_per_class;
    let mut samples = Array2::zeros((n, spec.input_dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in samples.rows_mut().into_iter().enumerate() {
        let c = i / spec.n_per_class;
        for (v, &center) in row.iter_mut().zip(centers.row(c)) {
            *v = center + spec.spread * rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(c);
    }
    LabeledDataset::new(samples, labels, class_names(spec.num_classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Class index → group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap(Vec<Group>);

impl GroupMap {
    pub fn new(groups: Vec<Group>) -> Self {
        Self(groups)
    }

    pub fn uniform(num_classes: usize, group: Group) -> Self {
        Self(vec![group; num_classes])
    }

    pub fn group_of(&self, class: usize) -> Option<Group> {
        self.0.get(class).copied()
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn classes_in(&self, group: Group) -> Vec<usize> {
        (0..self.0.len()).filter(|&c| self.0[c] == group).collect()
    }

    pub fn as_slice(&self) -> &[Group] {
        &self.0
    }
}

/// Many if `n_c > hi`, Few if `n_c < lo`, otherwise Medium.
pub fn split_many_medium_few(counts: &[usize], thresholds: (usize, usize)) -> Result<GroupMap> {
    let (hi, lo) = thresholds;
    if !(hi > lo && lo > 0) {
        return Err(Error::InvalidArgument(format!(
            "group thresholds need hi > lo > 0, got ({hi}, {lo})"
        )));
    }
    Ok(GroupMap(
        counts
            .iter()
            .map(|&n| {
                if n > hi {
                    Group::Many
                } else if n < lo {
                    Group::Few
                } else {
                    Group::Medium
                }
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImportManifest {
    input_dim: usize,
    num_classes: usize,
    class_names: Vec<String>,
}

/// Reads `manifest.json`, `data.f32` and `labels.u32` from `dir`.
pub fn import_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ImportManifest = serde_json::from_str(&text)?;
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::Format(format!(
            "manifest lists {} class names for num_classes = {}",
            manifest.class_names.len(),
            manifest.num_classes
        )));
    }
    if manifest.input_dim == 0 {
        return Err(Error::Format("manifest input_dim must be positive".into()));
    }
    let data_path = dir.join("data.f32");
    let labels_path = dir.join("labels.u32");
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let raw_labels = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    if data.len() % 4 != 0 || raw_labels.len() % 4 != 0 {
        return Err(Error::Format("payload length is not a multiple of 4 bytes".into()));
    }
    let n = raw_labels.len() / 4;
    if data.len() / 4 != n * manifest.input_dim {
        return Err(Error::Format(format!(
            "data.f32 holds {} floats, expected {} rows x {}",
            data.len() / 4,
            n,
            manifest.input_dim
        )));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let labels: Vec<usize> = raw_labels
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    let samples = Array2::from_shape_vec((n, manifest.input_dim), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    LabeledDataset::new(samples, labels, manifest.class_names).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `dataset` in the import format (samples narrowed to `f32`).
pub fn export_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ImportManifest {
        input_dim: dataset.input_dim(),
        num_classes: dataset.num_classes(),
        class_names: dataset.class_names().to_vec(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    let data: Vec<u8> = dataset
        .samples()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let labels: Vec<u8> = dataset
        .labels()
        .iter()
        .flat_map(|&l| (l as u32).to_le_bytes())
        .collect();
    let data_path = dir.join("data.f32");
    fs::write(&data_path, data).map_err(|e| Error::io(&data_path, e))?;
    let labels_path = dir.join("labels.u32");
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))
}

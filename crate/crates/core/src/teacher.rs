//! Frozen vision-language teacher, reduced to what training needs: one unit
//! text prototype per prompted class name and one unit image embedding per
//! training sample. Teacher logits are `scale · cos(embedding, prototype_c)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledDataset;
use crate::embedding::EmbeddingSet;
use crate::error::{check_dim, Error, Result};
use crate::model::softmax;
use crate::rng::{derive_seed, fnv1a, seeded, stream};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "This is a {name}";
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    vectors: Array2<f64>,
    class_names: Vec<String>,
    prompt_template: String,
}

fn l2(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn gaussian_unit(seed: u64, dim: usize) -> Array1<f64> {
    let mut rng = seeded(seed);
    let v = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    let n = l2(v.view());
    v / n
}

impl PrototypeTable {
    pub fn new(class_names: Vec<String>, vectors: Array2<f64>, prompt_template: impl Into<String>) -> Result<Self> {
        check_dim("prototype rows", class_names.len(), vectors.nrows())?;
        if vectors.ncols() == 0 {
            return Err(Error::Empty("prototype dimension"));
        }
        for (name, row) in class_names.iter().zip(vectors.rows()) {
            let n = l2(row);
            if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::InvalidArgument(format!("prototype for {name:?} has norm {n}")));
            }
        }
        Ok(Self {
            vectors,
            class_names,
            prompt_template: prompt_template.into(),
        })
    }

    /// Seeded Gaussian prototypes, L2-normalized. Each vector depends only on
    /// `(seed, class name)`.
    pub fn stub(class_names: &[String], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("prototype dimension"));
        }
        let mut vectors = Array2::zeros((class_names.len(), dim));
        for (mut row, name) in vectors.rows_mut().into_iter().zip(class_names) {
            let s = derive_seed(seed, stream::PROTOTYPE, fnv1a(name.as_bytes()));
            row.assign(&gaussian_unit(s, dim));
        }
        Self::new(class_names.to_vec(), vectors, DEFAULT_PROMPT_TEMPLATE)
    }

    /// Picks the `class:<name>` rows of a loaded container in `class_names` order.
    pub fn from_embeddings(set: &EmbeddingSet, class_names: &[String]) -> Result<Self> {
        let mut vectors = Array2::zeros((class_names.len(), set.dim));
        for (mut row, name) in vectors.rows_mut().into_iter().zip(class_names) {
            let v = set
                .class_vector(name)
                .ok_or_else(|| Error::Format(format!("no prototype for class {name:?}")))?;
            row.assign(&Array1::from_iter(v.iter().map(|&x| f64::from(x))));
        }
        Self::new(class_names.to_vec(), vectors, set.prompt_template.clone())
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }

    pub fn prototype(&self, class: usize) -> Result<ArrayView1<'_, f64>> {
        if class >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: class,
                num_classes: self.num_classes(),
            });
        }
        Ok(self.vectors.row(class))
    }

    /// The sentence fed to the text encoder for `class`.
    pub fn prompt(&self, class: usize) -> Result<String> {
        self.prototype(class)?;
        Ok(self.prompt_template.replace("{name}", &self.class_names[class]))
    }
}

/// `softmax(scale · cos(embedding, prototype_c))` over classes.
pub fn teacher_probs(embedding: ArrayView1<f64>, table: &PrototypeTable, scale: f64) -> Result<Array1<f64>> {
    check_dim("teacher embedding", table.dim(), embedding.len())?;
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("logit scale must be >= 0, got {scale}")));
    }
    let n = l2(embedding);
    if n == 0.0 {
        return Err(Error::Degenerate("zero teacher embedding".into()));
    }
    let logits = table.vectors.dot(&embedding) * (scale / n);
    Ok(softmax(logits.view()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub image_embedding: Array1<f64>,
    pub probs: Array1<f64>,
}

pub trait TeacherProvider: Send + Sync {
    fn prototypes(&self) -> &PrototypeTable;

    fn logit_scale(&self) -> f64;

    /// Unit image embedding of the sample with this id.
    fn embedding(&self, sample_id: usize) -> Result<Array1<f64>>;

    fn output(&self, sample_id: usize) -> Result<TeacherOutput> {
        let image_embedding = self.embedding(sample_id)?;
        let probs = teacher_probs(image_embedding.view(), self.prototypes(), self.logit_scale())?;
        Ok(TeacherOutput { image_embedding, probs })
    }
}

/// Stand-in teacher: a sample's embedding is its true class prototype plus
/// seeded Gaussian noise, renormalized.
#[derive(Debug, Clone)]
pub struct StubTeacher {
    table: PrototypeTable,
    labels: BTreeMap<usize, usize>,
    noise_sigma: f64,
    seed: u64,
    logit_scale: f64,
}

impl StubTeacher {
    pub fn new(dataset: &LabeledDataset, dim: usize, noise_sigma: f64, seed: u64, logit_scale: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        let table = PrototypeTable::stub(dataset.class_names(), dim, seed)?;
        let labels = dataset
            .sample_ids()
            .iter()
            .copied()
            .zip(dataset.labels().iter().copied())
            .collect();
        Ok(Self {
            table,
            labels,
            noise_sigma,
            seed,
            logit_scale,
        })
    }
}

/// Stub provider with the default logit scale.
pub fn stub_teacher(dataset: &LabeledDataset, dim: usize, noise_sigma: f64, seed: u64) -> Result<StubTeacher> {
    StubTeacher::new(dataset, dim, noise_sigma, seed, DEFAULT_LOGIT_SCALE)
}

impl TeacherProvider for StubTeacher {
    fn prototypes(&self) -> &PrototypeTable {
        &self.table
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    fn embedding(&self, sample_id: usize) -> Result<Array1<f64>> {
        let &label = self
            .labels
            .get(&sample_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id {sample_id}")))?;
        let proto = self.table.prototype(label)?;
        let mut rng = seeded(derive_seed(self.seed, stream::SAMPLE_EMBEDDING, sample_id as u64));
        let mut e = proto.to_owned();
        for v in e.iter_mut() {
            *v += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let n = l2(e.view());
        if n > 0.0 {
            e /= n;
            Ok(e)
        } else {
            Ok(proto.to_owned())
        }
    }
}

/// Teacher backed by an exported embedding container.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    table: PrototypeTable,
    samples: BTreeMap<usize, Array1<f64>>,
    logit_scale: f64,
}

impl FileTeacher {
    pub fn new(set: &EmbeddingSet, class_names: &[String], logit_scale: f64) -> Result<Self> {
        let table = PrototypeTable::from_embeddings(set, class_names)?;
        let samples = set
            .samples
            .iter()
            .map(|(&id, v)| (id, Array1::from_iter(v.iter().map(|&x| f64::from(x)))))
            .collect();
        Ok(Self {
            table,
            samples,
            logit_scale,
        })
    }
}

impl TeacherProvider for FileTeacher {
    fn prototypes(&self) -> &PrototypeTable {
        &self.table
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    fn embedding(&self, sample_id: usize) -> Result<Array1<f64>> {
        self.samples
            .get(&sample_id)
            .cloned()
            .ok_or_else(|| Error::Format(format!("no embedding for sample:{sample_id}")))
    }
}

/// Teacher distributions precomputed once per run, keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct TeacherCache {
    probs: BTreeMap<usize, Array1<f64>>,
}

impl TeacherCache {
    pub fn build(provider: &dyn TeacherProvider, dataset: &LabeledDataset) -> Result<Self> {
        let probs = dataset
            .sample_ids()
            .iter()
            .map(|&id| Ok((id, provider.output(id)?.probs)))
            .collect::<Result<_>>()?;
        Ok(Self { probs })
    }

    pub fn get(&self, sample_id: usize) -> Option<ArrayView1<'_, f64>> {
        self.probs.get(&sample_id).map(|p| p.view())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Fraction of samples whose teacher argmax equals the label.
    pub fn top1_agreement(&self, dataset: &LabeledDataset) -> f64 {
        let hits = dataset
            .sample_ids()
            .iter()
            .zip(dataset.labels())
            .filter(|(id, &label)| self.get(**id).map(|p| argmax(p) == label).unwrap_or(false))
            .count();
        hits as f64 / dataset.len().max(1) as f64
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

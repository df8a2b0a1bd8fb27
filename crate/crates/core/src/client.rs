//! One client's round: distillation-regularized local SGD followed by
//! per-class classifier gradients against the server's retrained head.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::model::{backward_local, classifier_gradient, Example, FeatureExtractor, ModelParams};
use crate::rng::seeded;
use crate::teacher::TeacherCache;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// KD weight; 0 disables distillation.
    pub beta: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.0,
            beta: 3.0,
        }
    }
}

/// What a client sends back after a round. Holds only class-averaged
/// gradients; per-sample gradients never leave [`compute_class_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub class_gradients: BTreeMap<usize, Array2<f64>>,
    pub num_samples: usize,
    pub classes_present: BTreeSet<usize>,
}

/// Runs `epochs` passes of seeded-shuffled mini-batch SGD on the local loss.
pub fn local_train(
    global: &ModelParams,
    data: &LabeledDataset,
    teacher: &TeacherCache,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
    }
    let needs_teacher = cfg.beta > 0.0;
    let lookup = |row: usize| -> Result<_> {
        if !needs_teacher {
            return Ok(None);
        }
        let id = data.sample_ids()[row];
        teacher
            .get(id)
            .map(Some)
            .ok_or_else(|| Error::InvalidArgument(format!("no teacher output for sample {id}")))
    };

    let mut rng = seeded(seed);
    let mut params = global.clone();
    let mut velocity = (cfg.momentum > 0.0).then(|| params.zeros_like());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            for &row in chunk {
                batch.push(Example {
                    input: data.sample(row),
                    label: data.labels()[row],
                    teacher: lookup(row)?,
                });
            }
            let (_, grads) = backward_local(&params, &batch, cfg.beta)?;
            match velocity.as_mut() {
                Some(v) => {
                    for (vt, gt) in v.tensors_mut().into_iter().zip(grads.tensors()) {
                        for (a, &g) in vt.iter_mut().zip(gt) {
                            *a = cfg.momentum * *a + g;
                        }
                    }
                    params.scaled_add(-cfg.lr, v)?;
                }
                None => params.scaled_add(-cfg.lr, &grads)?,
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric("local training diverged".into()));
    }
    Ok(params)
}

/// `g_c = mean_i ∇_φ̂ CE(φ̂ z_i, c)` over up to `per_class_cap` seeded-sampled
/// members of each locally present class, with `z_i` from `extractor`.
pub fn compute_class_gradients(
    extractor: &FeatureExtractor,
    phi_hat: ArrayView2<f64>,
    data: &LabeledDataset,
    per_class_cap: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Array2<f64>>> {
    if data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    check_dim("retrained classifier columns", extractor.feature_dim(), phi_hat.ncols())?;
    check_dim("retrained classifier rows", data.num_classes(), phi_hat.nrows())?;
    let cap = per_class_cap.max(1);
    let mut rng = seeded(seed);
    let mut out = BTreeMap::new();
    for c in data.classes_present() {
        let mut rows = data.indices_of_class(c);
        if rows.len() > cap {
            rows.shuffle(&mut rng);
            rows.truncate(cap);
            rows.sort_unstable();
        }
        let mut sum = Array2::zeros(phi_hat.raw_dim());
        for &row in &rows {
            let z = extractor.forward(data.sample(row))?;
            sum += &classifier_gradient(phi_hat, z.view(), c)?;
        }
        sum /= rows.len() as f64;
        out.insert(c, sum);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientRoundConfig {
    pub local: LocalTrainConfig,
    pub per_class_cap: usize,
    /// Skip the class-gradient upload (FedAvg).
    pub send_gradients: bool,
}

/// Local training, then class gradients from the updated extractor.
pub fn run_client(
    global: &ModelParams,
    phi_hat: ArrayView2<f64>,
    data: &LabeledDataset,
    teacher: &TeacherCache,
    cfg: &ClientRoundConfig,
    train_seed: u64,
    gradient_seed: u64,
) -> Result<ClientUpdate> {
    let params = local_train(global, data, teacher, &cfg.local, train_seed)?;
    let class_gradients = if cfg.send_gradients {
        compute_class_gradients(&params.extractor, phi_hat, data, cfg.per_class_cap, gradient_seed)?
    } else {
        BTreeMap::new()
    };
    Ok(ClientUpdate {
        params,
        class_gradients,
        num_samples: data.len(),
        classes_present: data.classes_present(),
    })
}

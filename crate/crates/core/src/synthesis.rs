//! Server-side federated feature synthesis and classifier retraining.
//!
//! The bank holds `m` synthetic `d`-dimensional features per class. Each
//! round they are moved by gradient descent on
//!
//! ```text
//! L_total = mean_c D(g_c^v, g_c^agg) + η · L_pcl
//! ```
//!
//! where `D` is the row-wise cosine dissimilarity between the classifier
//! gradient produced by the class-`c` bank features and the aggregated real
//! gradient, and `L_pcl` contrasts every bank feature against its class text
//! prototype (positive, numerator only) and the other bank features
//! (denominator). Both gradients are analytic.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::softmax;
use crate::rng::seeded;
use crate::teacher::PrototypeTable;

/// Norm below which a vector counts as zero in cosine computations.
pub const NORM_EPS: f64 = 1e-12;

/// `m` features per class, stored class-major: row `i` has class `i / m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedFeatureBank {
    features: Array2<f64>,
    per_class: usize,
}

impl FederatedFeatureBank {
    pub fn new(features: Array2<f64>, per_class: usize) -> Result<Self> {
        if per_class == 0 || features.nrows() == 0 || !features.nrows().is_multiple_of(per_class) {
            return Err(Error::InvalidArgument(format!(
                "bank of {} rows cannot hold {per_class} features per class",
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite federated feature".into()));
        }
        Ok(Self { features, per_class })
    }

    /// Seeded `N(0, scale²)` initialization.
    pub fn random(num_classes: usize, per_class: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let features = Array2::from_shape_simple_fn((num_classes * per_class, dim), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self::new(features, per_class)
    }

    pub fn num_classes(&self) -> usize {
        self.features.nrows() / self.per_class
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn class_of(&self, row: usize) -> usize {
        row / self.per_class
    }

    pub fn class_features(&self, c: usize) -> ArrayView2<'_, f64> {
        self.features
            .slice(s![c * self.per_class..(c + 1) * self.per_class, ..])
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.class_of(i)).collect()
    }
}

/// Softmax of every row of `logits`.
fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let s = softmax(row.view());
        row.assign(&s);
    }
    out
}

/// Softmax residuals `softmax(V φᵀ) − onehot` for features `v` all labeled `class`.
fn residuals(phi: ArrayView2<f64>, v: ArrayView2<f64>, class: usize) -> (Array2<f64>, Array2<f64>) {
    let probs = softmax_rows(&v.dot(&phi.t()));
    let mut res = probs.clone();
    res.column_mut(class).mapv_inplace(|p| p - 1.0);
    (probs, res)
}

/// `g_c^v = (1/m) Σ_i ∇_φ̂ CE(φ̂ v_{c,i}, c)` for the class-`c` bank rows.
pub fn federated_gradient(phi_hat: ArrayView2<f64>, bank: &FederatedFeatureBank, class: usize) -> Result<Array2<f64>> {
    check_dim("bank feature dimension", phi_hat.ncols(), bank.dim())?;
    if class >= bank.num_classes() || class >= phi_hat.nrows() {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes: bank.num_classes().min(phi_hat.nrows()),
        });
    }
    let v = bank.class_features(class);
    let (_, res) = residuals(phi_hat, v, class);
    Ok(res.t().dot(&v) / bank.per_class() as f64)
}

fn row_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    (na >= NORM_EPS && nb >= NORM_EPS).then(|| a.dot(&b) / (na * nb))
}

/// Cosine dissimilarity `1 − cos(a, b)`; 1 when either vector is ~zero.
pub fn cosine_dissimilarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    row_cosine(a, b).map_or(1.0, |c| 1.0 - c)
}

/// `(1/C) Σ_j (1 − cos(g_v[j], g_agg[j]))`; zero rows contribute 1.
pub fn grad_match_loss(g_v: ArrayView2<f64>, g_agg: ArrayView2<f64>) -> Result<f64> {
    if g_v.dim() != g_agg.dim() {
        return Err(Error::InvalidArgument(format!(
            "gradient shapes differ: {:?} vs {:?}",
            g_v.dim(),
            g_agg.dim()
        )));
    }
    let rows = g_v.nrows() as f64;
    Ok(g_v
        .rows()
        .into_iter()
        .zip(g_agg.rows())
        .map(|(a, b)| cosine_dissimilarity(a, b))
        .sum::<f64>()
        / rows)
}

/// `∂D/∂g_v` for [`grad_match_loss`].
fn grad_match_loss_grad(g_v: ArrayView2<f64>, g_agg: ArrayView2<f64>) -> Array2<f64> {
    let rows = g_v.nrows() as f64;
    let mut out = Array2::zeros(g_v.raw_dim());
    for ((mut o, g), t) in out.rows_mut().into_iter().zip(g_v.rows()).zip(g_agg.rows()) {
        let ng = g.dot(&g).sqrt();
        let nt = t.dot(&t).sqrt();
        if ng < NORM_EPS || nt < NORM_EPS {
            continue;
        }
        let dot = g.dot(&t);
        Zip::from(&mut o).and(g).and(t).for_each(|o, &gi, &ti| {
            *o = -(ti / (ng * nt) - dot * gi / (ng * ng * ng * nt)) / rows;
        });
    }
    out
}

/// Gradient matching loss for one class and its gradient w.r.t. that class's
/// bank rows.
fn class_match_loss_and_grad(
    phi: ArrayView2<f64>,
    v: ArrayView2<f64>,
    class: usize,
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let m = v.nrows() as f64;
    let (probs, res) = residuals(phi, v, class);
    let g_v = res.t().dot(&v) / m;
    let loss = grad_match_loss(g_v.view(), target)?;
    let gamma = grad_match_loss_grad(g_v.view(), target);
    // direct path through v: (1/m) R Γ
    let mut grad = res.dot(&gamma);
    // path through the softmax: M = (V Γᵀ) ⊙ S, then M φ − rowsum(M) ⊙ (S φ)
    let mut mix = v.dot(&gamma.t());
    mix *= &probs;
    grad += &mix.dot(&phi);
    let row_sums = mix.sum_axis(Axis(1));
    let mean_phi = probs.dot(&phi);
    grad -= &(&mean_phi * &row_sums.insert_axis(Axis(1)));
    grad /= m;
    Ok((loss, grad))
}

/// Which bank features form the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PclNegatives {
    /// Every other bank feature `j ≠ i`.
    #[default]
    All,
    /// Only features of other classes.
    InterClass,
}

fn normalized_rows(x: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n >= NORM_EPS)) {
        return Err(Error::Degenerate(format!("{what} row {i} has zero norm")));
    }
    let unit = &x / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

fn check_pcl_inputs(bank: &FederatedFeatureBank, prototypes: &PrototypeTable, tau: f64) -> Result<()> {
    check_dim("prototype dimension", bank.dim(), prototypes.dim())?;
    check_dim("prototype classes", bank.num_classes(), prototypes.num_classes())?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if bank.len() < 2 {
        return Err(Error::Degenerate("contrastive loss needs at least two features".into()));
    }
    Ok(())
}

/// `Σ_i −log[ exp(cos(v_i, f_{c(i)})/τ) / Σ_{j≠i} exp(cos(v_i, v_j)/τ) ]`.
pub fn pcl_loss(bank: &FederatedFeatureBank, prototypes: &PrototypeTable, tau: f64, negatives: PclNegatives) -> Result<f64> {
    pcl_loss_and_grad(bank.features().view(), bank.per_class(), prototypes, tau, negatives, false).map(|(l, _)| l)
}

/// Loss and (optionally) its gradient w.r.t. the bank rows.
fn pcl_loss_and_grad(
    features: ArrayView2<f64>,
    per_class: usize,
    prototypes: &PrototypeTable,
    tau: f64,
    negatives: PclNegatives,
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let (unit, norms) = normalized_rows(features, "federated feature")?;
    let (protos, _) = normalized_rows(prototypes.vectors().view(), "prototype")?;
    let class_of = |i: usize| i / per_class;

    // similarities become the softmax weights W in place
    let mut weights = unit.dot(&unit.t());
    let inv_tau = 1.0 / tau;
    let mut loss = 0.0;
    for (i, mut row) in weights.rows_mut().into_iter().enumerate() {
        let row = row.as_slice_mut().expect("standard layout");
        let own = class_of(i);
        let masked = match negatives {
            PclNegatives::All => i..i + 1,
            PclNegatives::InterClass => own * per_class..(own + 1) * per_class,
        };
        let mut max = f64::NEG_INFINITY;
        for (j, s) in row.iter_mut().enumerate() {
            if masked.contains(&j) {
                *s = f64::NEG_INFINITY;
            } else {
                *s *= inv_tau;
                max = max.max(*s);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Degenerate(format!("feature {i} has no contrastive negatives")));
        }
        let mut denom = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let inv = 1.0 / denom;
        row.iter_mut().for_each(|s| *s *= inv);
        let lse = max + denom.ln();
        let positive = unit.row(i).dot(&protos.row(own)) * inv_tau;
        loss += lse - positive;
    }
    if !with_grad {
        return Ok((loss, None));
    }
    // ∂L/∂u_i = (1/τ)(−f_{c(i)} + Σ_j (W_ij + W_ji) u_j)
    let mut g_unit = weights.dot(&unit);
    ndarray::linalg::general_mat_mul(1.0, &weights.t(), &unit, 1.0, &mut g_unit);
    for (i, mut row) in g_unit.rows_mut().into_iter().enumerate() {
        row -= &protos.row(class_of(i));
    }
    g_unit *= inv_tau;
    // back through u = v / |v|
    let mut grad = g_unit;
    for ((mut g, u), &r) in grad.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let along = g.dot(&u);
        Zip::from(&mut g).and(u).for_each(|gi, &ui| *gi = (*gi - along * ui) / r);
    }
    Ok((loss, Some(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight `η` of the contrastive term.
    pub eta_pcl: f64,
    pub tau: f64,
    pub negatives: PclNegatives,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.1,
            eta_pcl: 0.001,
            tau: 0.1,
            negatives: PclNegatives::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub grad: f64,
    pub pcl: f64,
}

/// `L_total` and its gradient w.r.t. every bank row. `L_grad` averages over
/// the classes present in `g_agg`; absent classes only feel `L_pcl`. The
/// contrastive term is skipped entirely when `eta_pcl == 0`.
pub fn synthesis_objective(
    bank: &FederatedFeatureBank,
    g_agg: &BTreeMap<usize, Array2<f64>>,
    phi_hat: ArrayView2<f64>,
    prototypes: &PrototypeTable,
    cfg: &SynthesisConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    check_dim("bank feature dimension", phi_hat.ncols(), bank.dim())?;
    check_dim("bank classes", phi_hat.nrows(), bank.num_classes())?;
    let mut grad = Array2::zeros(bank.features().raw_dim());
    let mut loss_grad = 0.0;
    if !g_agg.is_empty() {
        let weight = 1.0 / g_agg.len() as f64;
        for (&c, target) in g_agg {
            if c >= bank.num_classes() {
                return Err(Error::LabelOutOfRange { label: c, num_classes: bank.num_classes() });
            }
            if target.dim() != phi_hat.dim() {
                return Err(Error::InvalidArgument(format!(
                    "aggregated gradient for class {c} has shape {:?}",
                    target.dim()
                )));
            }
            let (l, g) = class_match_loss_and_grad(phi_hat, bank.class_features(c), c, target.view())?;
            loss_grad += weight * l;
            let m = bank.per_class();
            grad.slice_mut(s![c * m..(c + 1) * m, ..]).scaled_add(weight, &g);
        }
    }
    let mut loss_pcl = 0.0;
    if cfg.eta_pcl != 0.0 {
        check_pcl_inputs(bank, prototypes, cfg.tau)?;
        let (l, g) = pcl_loss_and_grad(bank.features().view(), bank.per_class(), prototypes, cfg.tau, cfg.negatives, true)?;
        loss_pcl = l;
        grad.scaled_add(cfg.eta_pcl, &g.expect("gradient requested"));
    }
    Ok((
        LossBreakdown {
            total: loss_grad + cfg.eta_pcl * loss_pcl,
            grad: loss_grad,
            pcl: loss_pcl,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
}

/// Plain gradient descent on [`synthesis_objective`] for `cfg.steps` steps.
/// `last` is evaluated on the returned bank.
pub fn optimize_features(
    bank: &FederatedFeatureBank,
    g_agg: &BTreeMap<usize, Array2<f64>>,
    phi_hat: ArrayView2<f64>,
    prototypes: &PrototypeTable,
    cfg: &SynthesisConfig,
) -> Result<(FederatedFeatureBank, SynthesisReport)> {
    if !(cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("feature lr must be >= 0, got {}", cfg.lr)));
    }
    let mut current = bank.clone();
    let (initial, mut grad) = synthesis_objective(&current, g_agg, phi_hat, prototypes, cfg)?;
    let mut last = initial;
    for _ in 0..cfg.steps {
        current.features.scaled_add(-cfg.lr, &grad);
        (last, grad) = synthesis_objective(&current, g_agg, phi_hat, prototypes, cfg)?;
    }
    if !last.total.is_finite() || current.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("federated feature synthesis diverged".into()));
    }
    Ok((current, SynthesisReport { initial, last }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            batch_size: 32,
        }
    }
}

/// Mean CE gradient of `phi` over the given bank rows.
fn bank_ce_gradient(phi: &Array2<f64>, features: ArrayView2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut res = softmax_rows(&features.dot(&phi.t()));
    for (mut row, &y) in res.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    res.t().dot(&features) / labels.len() as f64
}

/// Mini-batch SGD on cross-entropy over the bank, extractor untouched.
pub fn retrain_classifier(
    phi_init: ArrayView2<f64>,
    bank: &FederatedFeatureBank,
    cfg: &RetrainConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    check_dim("bank feature dimension", phi_init.ncols(), bank.dim())?;
    check_dim("bank classes", phi_init.nrows(), bank.num_classes())?;
    let labels = bank.labels();
    let mut phi = phi_init.to_owned();
    let n = bank.len();
    let full = cfg.batch_size == 0 || cfg.batch_size >= n;
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for _ in 0..cfg.steps {
        let grad = if full {
            bank_ce_gradient(&phi, bank.features().view(), &labels)
        } else {
            if cursor + cfg.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let rows = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            let feats = bank.features().select(Axis(0), rows);
            let ys: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            bank_ce_gradient(&phi, feats.view(), &ys)
        };
        phi.scaled_add(-cfg.lr, &grad);
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("classifier retraining diverged".into()));
    }
    Ok(phi)
}

/// Fraction of bank rows whose argmax under `phi` is their class.
pub fn bank_accuracy(phi: ArrayView2<f64>, bank: &FederatedFeatureBank) -> f64 {
    let logits = bank.features().dot(&phi.t());
    let hits = logits
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| crate::teacher::argmax(row.view()) == bank.class_of(*i))
        .count();
    hits as f64 / bank.len() as f64
}

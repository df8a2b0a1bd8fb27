//! Feed-forward feature extractor plus bias-free linear classifier, with the
//! closed-form losses and gradients shared by client and server code.
//!
//! Parameters are `f64` throughout. Batch reductions accumulate left to right
//! in sample order so results are bit-reproducible.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Floor applied to student probabilities inside the KL term.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        check_dim("dense layer bias", weights.nrows(), bias.len())?;
        Ok(Self { weights, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Stack of dense layers, ReLU between them, linear output of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<DenseLayer>,
}

impl FeatureExtractor {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("feature extractor layers"));
        }
        for pair in layers.windows(2) {
            check_dim(
                "feature extractor layer chain",
                pair[0].output_dim(),
                pair[1].input_dim(),
            )?;
        }
        Ok(Self { layers })
    }

    /// He-initialized extractor `input → hidden.. → feature_dim`.
    pub fn random<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer sizes must be positive".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((w[1], w[0]), || {
                    std * rng.sample::<f64, _>(StandardNormal)
                });
                DenseLayer {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Single linear layer computing the identity map.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![DenseLayer {
                weights: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// `z = f_θ(x)`.
    pub fn forward(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("extractor input", self.input_dim(), input.len())?;
        let last = self.layers.len() - 1;
        let mut act = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.weights.dot(&act);
            pre += &layer.bias;
            if i < last {
                pre.mapv_inplace(relu);
            }
            act = pre;
        }
        Ok(act)
    }

    /// Features for every row of `inputs` (`n × input_dim` → `n × d`).
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("extractor input", self.input_dim(), inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut act = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = act.dot(&layer.weights.t());
            pre += &layer.bias;
            if i < last {
                pre.mapv_inplace(relu);
            }
            act = pre;
        }
        Ok(act)
    }

    /// Pre-activations of every layer, used by backprop.
    fn trace(&self, input: ArrayView1<f64>) -> Vec<Array1<f64>> {
        let last = self.layers.len() - 1;
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut act = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.weights.dot(&act);
            pre += &layer.bias;
            act = if i < last { pre.mapv(relu) } else { pre.clone() };
            pre_acts.push(pre);
        }
        pre_acts
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `w = {θ, φ}`: extractor parameters plus the `C × d` classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: FeatureExtractor,
    /// `C × d`, no bias.
    pub classifier: Array2<f64>,
}

impl ModelParams {
    pub fn new(extractor: FeatureExtractor, classifier: Array2<f64>) -> Result<Self> {
        check_dim(
            "classifier columns",
            extractor.feature_dim(),
            classifier.ncols(),
        )?;
        if classifier.nrows() == 0 {
            return Err(Error::Empty("classifier rows"));
        }
        let params = Self {
            extractor,
            classifier,
        };
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(params)
    }

    pub fn random<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::random(input_dim, hidden, feature_dim, rng)?;
        let std = (1.0 / feature_dim as f64).sqrt();
        let classifier = Array2::from_shape_simple_fn((num_classes, feature_dim), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self::new(extractor, classifier)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .extractor
            .layers
            .iter()
            .map(|l| DenseLayer::zeros(l.input_dim(), l.output_dim()))
            .collect();
        Self {
            extractor: FeatureExtractor { layers },
            classifier: Array2::zeros(self.classifier.raw_dim()),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.classifier.dim() == other.classifier.dim()
            && self.extractor.layers.len() == other.extractor.layers.len()
            && self
                .extractor
                .layers
                .iter()
                .zip(&other.extractor.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim())
    }

    /// Flat views of every parameter tensor: layer weights and biases in
    /// order, then the classifier.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.extractor.layers.len() + 1);
        for layer in &self.extractor.layers {
            out.push(layer.weights.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.classifier.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.extractor.layers.len() + 1);
        for layer in &mut self.extractor.layers {
            out.push(layer.weights.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.classifier.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidArgument("parameter shape mismatch".into()));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    /// Logits for one raw input.
    pub fn logits(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        let z = self.extractor.forward(input)?;
        classify(self.classifier.view(), z.view())
    }
}

/// `p = φ · z`.
pub fn classify(phi: ArrayView2<f64>, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_dim("classifier input", phi.ncols(), z.len())?;
    Ok(phi.dot(&z))
}

/// Max-shifted softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum: f64 = out.iter().sum();
    out /= sum;
    out
}

fn log_sum_exp(logits: ArrayView1<f64>) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label < num_classes {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange { label, num_classes })
    }
}

/// `−log softmax(p)[y]`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// `KL(q ‖ p) = Σ q_c log(q_c / p_c)` with `0·log 0 = 0` and `p` floored at
/// [`PROB_FLOOR`].
pub fn kl_divergence(q: ArrayView1<f64>, p: ArrayView1<f64>) -> Result<f64> {
    check_dim("kl divergence", q.len(), p.len())?;
    if q.iter().chain(p.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "probability vectors must be finite and nonnegative".into(),
        ));
    }
    let kl = q
        .iter()
        .zip(p.iter())
        .filter(|(&qc, _)| qc > 0.0)
        .map(|(&qc, &pc)| qc * (qc / pc.max(PROB_FLOOR)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `L_loc = CE(y, p) + β · KL(q ‖ softmax(p))`.
pub fn local_loss(
    logits: ArrayView1<f64>,
    teacher: ArrayView1<f64>,
    label: usize,
    beta: f64,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let ce = cross_entropy(logits, label)?;
    let kl = kl_divergence(teacher, softmax(logits).view())?;
    Ok(ce + beta * kl)
}

/// `∇_φ CE(φ z, y) = (softmax(φ z) − e_y) zᵀ`.
pub fn classifier_gradient(
    phi: ArrayView2<f64>,
    z: ArrayView1<f64>,
    label: usize,
) -> Result<Array2<f64>> {
    check_label(label, phi.nrows())?;
    let mut residual = softmax(classify(phi, z)?.view());
    residual[label] -= 1.0;
    Ok(outer(residual.view(), z))
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// One training example handed to [`backward_local`].
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: ArrayView1<'a, f64>,
    pub label: usize,
    /// Teacher distribution `q`; required when `beta > 0`.
    pub teacher: Option<ArrayView1<'a, f64>>,
}

/// Mean local loss and its gradient w.r.t. every parameter, by backprop.
pub fn backward_local(
    params: &ModelParams,
    batch: &[Example<'_>],
    beta: f64,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let num_classes = params.num_classes();
    let layers = &params.extractor.layers;
    let mut grads = params.zeros_like();
    let mut total = 0.0;

    for ex in batch {
        check_dim("extractor input", params.extractor.input_dim(), ex.input.len())?;
        check_label(ex.label, num_classes)?;
        let pre = params.extractor.trace(ex.input);
        let z = &pre[pre.len() - 1];
        let logits = params.classifier.dot(z);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let probs = softmax(logits.view());

        let mut delta = probs.clone();
        delta[ex.label] -= 1.0;
        let mut loss = cross_entropy(logits.view(), ex.label)?;
        if beta > 0.0 {
            let q = ex.teacher.ok_or_else(|| {
                Error::InvalidArgument("teacher probabilities required when beta > 0".into())
            })?;
            check_dim("teacher probabilities", num_classes, q.len())?;
            loss += beta * kl_divergence(q, probs.view())?;
            // d KL(q‖softmax(p)) / dp = softmax(p) − q for normalized q
            Zip::from(&mut delta)
                .and(&probs)
                .and(q)
                .for_each(|d, &s, &qc| *d += beta * (s - qc));
        }
        total += loss;

        grads.classifier += &outer(delta.view(), z.view());
        let mut back = params.classifier.t().dot(&delta);
        for li in (0..layers.len()).rev() {
            let input = if li == 0 {
                ex.input.to_owned()
            } else {
                pre[li - 1].mapv(relu)
            };
            let g = &mut grads.extractor.layers[li];
            g.weights += &outer(back.view(), input.view());
            g.bias += &back;
            if li > 0 {
                let mut next = layers[li].weights.t().dot(&back);
                Zip::from(&mut next)
                    .and(&pre[li - 1])
                    .for_each(|b, &h| {
                        if h <= 0.0 {
                            *b = 0.0;
                        }
                    });
                back = next;
            }
        }
    }

    let n = batch.len() as f64;
    for t in grads.tensors_mut() {
        for v in t.iter_mut() {
            *v /= n;
        }
    }
    Ok((total / n, grads))
}

/// Mean local loss over a batch without gradients.
pub fn batch_local_loss(params: &ModelParams, batch: &[Example<'_>], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let logits = params.logits(ex.input)?;
        total += match (beta > 0.0, ex.teacher) {
            (true, Some(q)) => local_loss(logits.view(), q, ex.label, beta)?,
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "teacher probabilities required when beta > 0".into(),
                ))
            }
            (false, _) => cross_entropy(logits.view(), ex.label)?,
        };
    }
    Ok(total / batch.len() as f64)
}

/// `w ← w − lr · ∇w`.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut next = params.clone();
    next.scaled_add(-lr, grads)?;
    Ok(next)
}

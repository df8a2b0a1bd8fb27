//! Evaluation: group-wise accuracy, linear CKA and the gradient / feature
//! dissimilarities tracked during synthesis.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Group, GroupMap, LabeledDataset};
use crate::error::{check_dim, Error, Result};
use crate::model::{FeatureExtractor, ModelParams};
use crate::synthesis::{cosine_dissimilarity, grad_match_loss, FederatedFeatureBank};
use crate::teacher::argmax;

/// Predicted class for every row of `inputs`.
pub fn predict(extractor: &FeatureExtractor, classifier: ArrayView2<f64>, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
    check_dim("classifier columns", extractor.feature_dim(), classifier.ncols())?;
    let logits = extractor.forward_batch(inputs)?.dot(&classifier.t());
    Ok(logits.rows().into_iter().map(argmax).collect())
}

pub fn top1_accuracy(params: &ModelParams, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let preds = predict(&params.extractor, params.classifier.view(), dataset.samples().view())?;
    let hits = preds.iter().zip(dataset.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Accuracy overall and per group. A group with no test samples is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub all: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl GroupAccuracy {
    pub fn get(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

pub fn groupwise_accuracy(
    extractor: &FeatureExtractor,
    classifier: ArrayView2<f64>,
    dataset: &LabeledDataset,
    groups: &GroupMap,
) -> Result<GroupAccuracy> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    check_dim("group map classes", dataset.num_classes(), groups.num_classes())?;
    let preds = predict(extractor, classifier, dataset.samples().view())?;
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    let mut all_hits = 0;
    for (&p, &y) in preds.iter().zip(dataset.labels()) {
        let hit = usize::from(p == y);
        all_hits += hit;
        if let Some(g) = groups.group_of(y) {
            hits[g as usize] += hit;
            totals[g as usize] += 1;
        }
    }
    let ratio = |g: Group| (totals[g as usize] > 0).then(|| hits[g as usize] as f64 / totals[g as usize] as f64);
    Ok(GroupAccuracy {
        all: all_hits as f64 / dataset.len() as f64,
        many: ratio(Group::Many),
        medium: ratio(Group::Medium),
        few: ratio(Group::Few),
    })
}

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    &x - &mean
}

/// Linear CKA with column centering:
/// `‖X̄ᵀȲ‖_F² / (‖X̄ᵀX̄‖_F ‖ȲᵀȲ‖_F)`.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_dim("CKA sample count", x.nrows(), y.nrows())?;
    if x.nrows() < 2 {
        return Err(Error::Degenerate("CKA needs at least two samples".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    let frob = |m: Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xx = frob(xc.t().dot(&xc));
    let yy = frob(yc.t().dot(&yc));
    if !(xx > 0.0) || !(yy > 0.0) {
        return Err(Error::Degenerate("CKA input has zero variance".into()));
    }
    let xy = frob(xc.t().dot(&yc));
    Ok((xy * xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Mean linear CKA over all unordered pairs of extractors on a shared probe.
/// `None` with fewer than two extractors.
pub fn mean_pairwise_cka(extractors: &[&FeatureExtractor], probe: ArrayView2<f64>) -> Result<Option<f64>> {
    if extractors.len() < 2 {
        return Ok(None);
    }
    let feats = extractors
        .iter()
        .map(|e| e.forward_batch(probe))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            sum += linear_cka(feats[i].view(), feats[j].view())?;
            pairs += 1;
        }
    }
    Ok(Some(sum / pairs as f64))
}

/// Mean extracted feature of each class present in `dataset`.
pub fn class_mean_features(extractor: &FeatureExtractor, dataset: &LabeledDataset) -> Result<BTreeMap<usize, Array1<f64>>> {
    let feats = extractor.forward_batch(dataset.samples().view())?;
    let mut out = BTreeMap::new();
    for c in dataset.classes_present() {
        let rows = dataset.indices_of_class(c);
        let mean = feats.select(Axis(0), &rows).mean_axis(Axis(0)).expect("class is present");
        out.insert(c, mean);
    }
    Ok(out)
}

fn group_average(per_class: impl IntoIterator<Item = (usize, f64)>, groups: &GroupMap) -> Result<BTreeMap<Group, f64>> {
    let mut acc: BTreeMap<Group, (f64, usize)> = BTreeMap::new();
    for (c, v) in per_class {
        let g = groups.group_of(c).ok_or(Error::LabelOutOfRange {
            label: c,
            num_classes: groups.num_classes(),
        })?;
        let e = acc.entry(g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect())
}

/// Per class: mean over the bank rows of `1 − cos(v, mean_c)`, then averaged
/// within each group. Classes without a mean are skipped.
pub fn feature_dissimilarity(
    bank: &FederatedFeatureBank,
    class_means: &BTreeMap<usize, Array1<f64>>,
    groups: &GroupMap,
) -> Result<BTreeMap<Group, f64>> {
    let mut per_class = Vec::with_capacity(class_means.len());
    for (&c, mean) in class_means {
        if c >= bank.num_classes() {
            return Err(Error::LabelOutOfRange { label: c, num_classes: bank.num_classes() });
        }
        check_dim("class mean dimension", bank.dim(), mean.len())?;
        let rows = bank.class_features(c);
        let total: f64 = rows.rows().into_iter().map(|v| cosine_dissimilarity(v, mean.view())).sum();
        per_class.push((c, total / rows.nrows() as f64));
    }
    group_average(per_class, groups)
}

/// Per class gradient matching loss between `g_v` and `g_agg`, group-averaged.
/// Both maps must have the same keys.
pub fn gradient_dissimilarity(
    g_v: &BTreeMap<usize, Array2<f64>>,
    g_agg: &BTreeMap<usize, Array2<f64>>,
    groups: &GroupMap,
) -> Result<BTreeMap<Group, f64>> {
    if !g_v.keys().eq(g_agg.keys()) {
        return Err(Error::InvalidArgument(format!(
            "gradient maps have different classes: {:?} vs {:?}",
            g_v.keys().collect::<Vec<_>>(),
            g_agg.keys().collect::<Vec<_>>()
        )));
    }
    let per_class = g_v
        .iter()
        .map(|(&c, gv)| Ok((c, grad_match_loss(gv.view(), g_agg[&c].view())?)))
        .collect::<Result<Vec<_>>>()?;
    group_average(per_class, groups)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_all: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
    pub grad_dissim: BTreeMap<Group, f64>,
    pub feat_dissim: BTreeMap<Group, f64>,
    pub loss_grad: Option<f64>,
    pub loss_pcl: Option<f64>,
    /// Mean pairwise feature-layer CKA among this round's client models.
    pub cka_mean: Option<f64>,
    pub num_selected: usize,
}

impl RoundMetrics {
    pub fn is_finite(&self) -> bool {
        let scalars = [Some(self.acc_all), self.acc_many, self.acc_medium, self.acc_few, self.loss_grad, self.loss_pcl, self.cka_mean];
        scalars.iter().flatten().all(|v| v.is_finite())
            && self.grad_dissim.values().chain(self.feat_dissim.values()).all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Fixed evaluation assets shared by every round.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub test: LabeledDataset,
    pub groups: GroupMap,
    /// Balanced test rows used for CKA.
    pub probe: Array2<f64>,
    /// Pooled training data, for real class-mean features.
    pub train: LabeledDataset,
}

impl Evaluator {
    pub fn new(test: LabeledDataset, train: LabeledDataset, groups: GroupMap, probe_size: usize) -> Result<Self> {
        check_dim("test classes", groups.num_classes(), test.num_classes())?;
        check_dim("train classes", groups.num_classes(), train.num_classes())?;
        let probe_rows = balanced_rows(&test, probe_size);
        if probe_rows.is_empty() {
            return Err(Error::Empty("CKA probe"));
        }
        let probe = test.samples().select(Axis(0), &probe_rows);
        Ok(Self { test, groups, probe, train })
    }
}

/// Up to `n` rows taken round-robin across classes, in class order.
pub fn balanced_rows(dataset: &LabeledDataset, n: usize) -> Vec<usize> {
    let per_class: Vec<Vec<usize>> = (0..dataset.num_classes()).map(|c| dataset.indices_of_class(c)).collect();
    let mut out = Vec::with_capacity(n);
    let mut depth = 0;
    while out.len() < n {
        let mut took = false;
        for rows in &per_class {
            if out.len() == n {
                break;
            }
            if let Some(&r) = rows.get(depth) {
                out.push(r);
                took = true;
            }
        }
        if !took {
            break;
        }
        depth += 1;
    }
    out
}

/// Cosine similarity, 0 for zero vectors.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    1.0 - cosine_dissimilarity(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::data::class_names;
    use crate::rng::seeded;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn cka_identity_and_invariances() {
        let x = gaussian(50, 6, 1);
        assert_abs_diff_eq!(linear_cka(x.view(), x.view()).unwrap(), 1.0, epsilon = 1e-9);
        let shifted = &x * 2.0 + 3.5;
        assert_abs_diff_eq!(linear_cka(x.view(), shifted.view()).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cka_independent_is_small() {
        let x = gaussian(1000, 8, 2);
        let y = gaussian(1000, 8, 3);
        assert!(linear_cka(x.view(), y.view()).unwrap() < 0.1);
    }

    #[test]
    fn cka_rejects_constant_input() {
        let x = gaussian(10, 3, 4);
        let c = Array2::from_elem((10, 3), 2.0);
        assert!(matches!(linear_cka(x.view(), c.view()), Err(Error::Degenerate(_))));
    }

    fn two_groups() -> GroupMap {
        GroupMap::new(vec![Group::Many, Group::Few])
    }

    #[test]
    fn feature_dissimilarity_extremes() {
        let means: BTreeMap<usize, Array1<f64>> = [(0, array![1.0, 0.0]), (1, array![0.0, 2.0])].into();
        let equal = FederatedFeatureBank::new(array![[1.0, 0.0], [3.0, 0.0], [0.0, 1.0], [0.0, 5.0]], 2).unwrap();
        let d = feature_dissimilarity(&equal, &means, &two_groups()).unwrap();
        assert_abs_diff_eq!(d[&Group::Many], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[&Group::Few], 0.0, epsilon = 1e-12);
        let ortho = FederatedFeatureBank::new(array![[0.0, 1.0], [0.0, 2.0], [1.0, 0.0], [-4.0, 0.0]], 2).unwrap();
        let d = feature_dissimilarity(&ortho, &means, &two_groups()).unwrap();
        assert_abs_diff_eq!(d[&Group::Many], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[&Group::Few], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_dissimilarity_cases() {
        let g: BTreeMap<usize, Array2<f64>> = [(0, gaussian(2, 3, 1)), (1, gaussian(2, 3, 2))].into();
        let d = gradient_dissimilarity(&g, &g, &two_groups()).unwrap();
        assert!(d.values().all(|v| v.abs() < 1e-12));
        let neg: BTreeMap<usize, Array2<f64>> = [(0, g[&0].clone()), (1, -&g[&1])].into();
        let d = gradient_dissimilarity(&g, &neg, &two_groups()).unwrap();
        assert_abs_diff_eq!(d[&Group::Few], 2.0, epsilon = 1e-9);
        let missing: BTreeMap<usize, Array2<f64>> = [(0, g[&0].clone())].into();
        assert!(gradient_dissimilarity(&g, &missing, &two_groups()).is_err());
    }

    #[test]
    fn groupwise_all_is_weighted_mean_of_groups() {
        let data = LabeledDataset::new(gaussian(30, 2, 9), (0..30).map(|i| i % 3).collect(), class_names(3)).unwrap();
        let groups = GroupMap::new(vec![Group::Many, Group::Medium, Group::Few]);
        let extractor = FeatureExtractor::identity(2);
        let phi = gaussian(3, 2, 10);
        let acc = groupwise_accuracy(&extractor, phi.view(), &data, &groups).unwrap();
        let weighted = (acc.many.unwrap() + acc.medium.unwrap() + acc.few.unwrap()) / 3.0;
        assert_abs_diff_eq!(acc.all, weighted, epsilon = 1e-12);
    }

    #[test]
    fn empty_group_is_none() {
        let data = LabeledDataset::new(gaussian(4, 2, 1), vec![0, 0, 1, 1], class_names(2)).unwrap();
        let groups = GroupMap::new(vec![Group::Many, Group::Many]);
        let acc = groupwise_accuracy(&FeatureExtractor::identity(2), gaussian(2, 2, 2).view(), &data, &groups).unwrap();
        assert!(acc.medium.is_none() && acc.few.is_none() && acc.many.is_some());
    }

    #[test]
    fn balanced_rows_round_robin() {
        let data = LabeledDataset::new(gaussian(6, 1, 1), vec![0, 0, 0, 0, 1, 2], class_names(3)).unwrap();
        assert_eq!(balanced_rows(&data, 5), vec![0, 4, 5, 1, 2]);
        assert_eq!(balanced_rows(&data, 100).len(), 6);
    }

    #[test]
    fn metrics_serialize_absent_as_null() {
        let m = RoundMetrics {
            round: 0,
            acc_all: 0.5,
            acc_many: Some(0.75),
            acc_medium: None,
            acc_few: None,
            grad_dissim: [(Group::Few, 0.25)].into(),
            feat_dissim: BTreeMap::new(),
            loss_grad: None,
            loss_pcl: None,
            cka_mean: None,
            num_selected: 1,
        };
        let line = m.to_json_line().unwrap();
        assert!(line.contains("\"acc_medium\":null"), "{line}");
        assert!(line.contains("\"grad_dissim\":{\"few\":0.25}"), "{line}");
        let back: RoundMetrics = serde_json::from_str(&line).unwrap();
        assert_eq!(back, m);
    }
}

//! Server side of a communication round: client selection, aggregation,
//! feature synthesis, classifier retraining and per-round evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::client::{run_client, ClientRoundConfig, ClientUpdate, LocalTrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{
    class_mean_features, feature_dissimilarity, gradient_dissimilarity, groupwise_accuracy, mean_pairwise_cka,
    Evaluator, RoundMetrics,
};
use crate::model::ModelParams;
use crate::rng::{derive_seed, seeded, stream};
use crate::synthesis::{
    federated_gradient, optimize_features, retrain_classifier, FederatedFeatureBank, RetrainConfig, SynthesisConfig,
};
use crate::teacher::{PrototypeTable, TeacherCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    #[default]
    Clip2fl,
    NoPcl,
    NoKd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fedavg, Method::Clip2fl, Method::NoPcl, Method::NoKd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::Clip2fl => "clip2fl",
            Method::NoPcl => "no_pcl",
            Method::NoKd => "no_kd",
        }
    }

    /// Whether the server synthesizes features and retrains its head.
    pub fn synthesizes(self) -> bool {
        self != Method::Fedavg
    }

    /// Forces the knobs each method switches off: `eta_pcl` for no_pcl,
    /// `beta` for no_kd and fedavg.
    pub fn apply(self, cfg: &mut RoundConfig) {
        cfg.method = self;
        match self {
            Method::Clip2fl => {}
            Method::NoPcl => cfg.synthesis.eta_pcl = 0.0,
            Method::NoKd | Method::Fedavg => cfg.local.beta = 0.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected fedavg, clip2fl, no_pcl or no_kd)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub method: Method,
    pub client_fraction: f64,
    pub local: LocalTrainConfig,
    pub per_class_cap: usize,
    pub synthesis: SynthesisConfig,
    pub retrain: RetrainConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            method: Method::Clip2fl,
            client_fraction: 0.4,
            local: LocalTrainConfig::default(),
            per_class_cap: 64,
            synthesis: SynthesisConfig::default(),
            retrain: RetrainConfig::default(),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("server.fraction", "must be in (0, 1]");
        }
        if self.local.epochs == 0 || self.local.batch_size == 0 {
            return bad("training.epochs/batch_size", "must be >= 1");
        }
        if !(self.local.lr >= 0.0) || !(self.local.beta >= 0.0) || !(0.0..1.0).contains(&self.local.momentum) {
            return bad("training", "lr and beta must be >= 0, momentum in [0, 1)");
        }
        if self.per_class_cap == 0 {
            return bad("training.per_class_cap", "must be >= 1");
        }
        let s = &self.synthesis;
        if !(s.lr >= 0.0) || !(s.eta_pcl >= 0.0) || !(s.tau > 0.0) {
            return bad("server", "feature_lr and eta_pcl must be >= 0, tau > 0");
        }
        if !(self.retrain.lr >= 0.0) {
            return bad("server.retrain_lr", "must be >= 0");
        }
        Ok(())
    }
}

/// `w^t`, `φ̂^t`, `V^t` and the round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ModelParams,
    pub retrained_classifier: Array2<f64>,
    pub bank: FederatedFeatureBank,
    pub round: usize,
}

impl ServerState {
    /// Round 0: `φ̂^0 = φ^0` and a freshly drawn bank.
    pub fn new(global: ModelParams, per_class: usize, bank_scale: f64, bank_seed: u64) -> Result<Self> {
        let bank = FederatedFeatureBank::random(global.num_classes(), per_class, global.feature_dim(), bank_scale, bank_seed)?;
        Ok(Self {
            retrained_classifier: global.classifier.clone(),
            global,
            bank,
            round: 0,
        })
    }
}

/// Client shards plus the frozen teacher assets they train against.
#[derive(Debug, Clone)]
pub struct Federation {
    pub shards: Vec<LabeledDataset>,
    pub teacher: TeacherCache,
    pub prototypes: PrototypeTable,
}

/// `⌈fraction·K⌉` distinct clients drawn for `round`, sorted.
pub fn select_clients(num_clients: usize, fraction: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("client fraction must be in (0, 1], got {fraction}")));
    }
    if num_clients == 0 {
        return Err(Error::Empty("client pool"));
    }
    // tolerance keeps 0.4·20 at 8 despite rounding error
    let count = ((fraction * num_clients as f64 - 1e-9).ceil() as usize).clamp(1, num_clients);
    let mut rng = seeded(derive_seed(seed, stream::SELECTION, round as u64));
    let mut all: Vec<usize> = (0..num_clients).collect();
    all.shuffle(&mut rng);
    let mut chosen = all[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `Σ_k (n_k / N) · w_k`, accumulated in list order.
pub fn aggregate_models(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Degenerate("client updates carry no samples".into()));
    }
    let mut out = first.params.zeros_like();
    for u in updates {
        if !u.params.same_shape(&out) {
            return Err(Error::InvalidArgument("client models have different shapes".into()));
        }
        out.scaled_add(u.num_samples as f64 / total as f64, &u.params)?;
    }
    Ok(out)
}

/// Per class, the unweighted mean over the clients that sent it. Classes no
/// client sent are absent.
pub fn aggregate_gradients(per_client: &[&BTreeMap<usize, Array2<f64>>]) -> Result<BTreeMap<usize, Array2<f64>>> {
    let mut sums: BTreeMap<usize, (Array2<f64>, usize)> = BTreeMap::new();
    let mut shape = None;
    for map in per_client {
        for (&c, g) in map.iter() {
            match shape {
                None => shape = Some(g.dim()),
                Some(s) if s != g.dim() => {
                    return Err(Error::InvalidArgument(format!(
                        "class gradient shapes differ: {s:?} vs {:?}",
                        g.dim()
                    )))
                }
                _ => {}
            }
            let e = sums.entry(c).or_insert_with(|| (Array2::zeros(g.raw_dim()), 0));
            e.0 += g;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

/// `(training seed, gradient sampling seed)` of client `client` in `round`.
pub fn client_seeds(master_seed: u64, round: usize, client: usize) -> (u64, u64) {
    let base = derive_seed(derive_seed(master_seed, stream::CLIENT, round as u64), client as u64, 0);
    (derive_seed(base, 0, 0), derive_seed(base, 1, 0))
}

fn train_clients(
    selected: &[usize],
    state: &ServerState,
    fed: &Federation,
    cfg: &ClientRoundConfig,
    master_seed: u64,
) -> Result<Vec<ClientUpdate>> {
    let work = |&k: &usize| {
        let shard = fed
            .shards
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("client {k} has no shard")))?;
        let (train_seed, grad_seed) = client_seeds(master_seed, state.round, k);
        run_client(
            &state.global,
            state.retrained_classifier.view(),
            shard,
            &fed.teacher,
            cfg,
            train_seed,
            grad_seed,
        )
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<ClientUpdate>> = {
        use rayon::prelude::*;
        selected.par_iter().map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<ClientUpdate>> = selected.iter().map(work).collect();
    results.into_iter().collect()
}

/// One communication round. FedAvg stops after model aggregation and is
/// evaluated with `w^{t+1}`; the other methods are evaluated with
/// `{θ^{t+1}, φ̂^{t+1}}`.
pub fn run_round(
    state: &ServerState,
    fed: &Federation,
    evaluator: &Evaluator,
    cfg: &RoundConfig,
    master_seed: u64,
) -> Result<(ServerState, RoundMetrics)> {
    cfg.validate()?;
    let selected = select_clients(
        fed.shards.len(),
        cfg.client_fraction,
        state.round,
        derive_seed(master_seed, stream::SELECTION, 0),
    )?;
    let client_cfg = ClientRoundConfig {
        local: cfg.local,
        per_class_cap: cfg.per_class_cap,
        send_gradients: cfg.method.synthesizes(),
    };
    let updates = train_clients(&selected, state, fed, &client_cfg, master_seed)?;
    let global = aggregate_models(&updates)?;
    let extractors: Vec<_> = updates.iter().map(|u| &u.params.extractor).collect();
    let cka_mean = mean_pairwise_cka(&extractors, evaluator.probe.view())?;

    let mut metrics = RoundMetrics {
        round: state.round,
        acc_all: 0.0,
        acc_many: None,
        acc_medium: None,
        acc_few: None,
        grad_dissim: BTreeMap::new(),
        feat_dissim: BTreeMap::new(),
        loss_grad: None,
        loss_pcl: None,
        cka_mean,
        num_selected: selected.len(),
    };

    let next = if cfg.method.synthesizes() {
        let maps: Vec<_> = updates.iter().map(|u| &u.class_gradients).collect();
        let g_agg = aggregate_gradients(&maps)?;
        let phi_hat = state.retrained_classifier.view();
        let (bank, report) = optimize_features(&state.bank, &g_agg, phi_hat, &fed.prototypes, &cfg.synthesis)?;
        let retrained = retrain_classifier(
            phi_hat,
            &bank,
            &cfg.retrain,
            derive_seed(master_seed, stream::RETRAIN, state.round as u64),
        )?;

        let g_v = g_agg
            .keys()
            .map(|&c| Ok((c, federated_gradient(phi_hat, &bank, c)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        metrics.grad_dissim = gradient_dissimilarity(&g_v, &g_agg, &evaluator.groups)?;
        let means = class_mean_features(&global.extractor, &evaluator.train)?;
        metrics.feat_dissim = feature_dissimilarity(&bank, &means, &evaluator.groups)?;
        metrics.loss_grad = Some(report.last.grad);
        metrics.loss_pcl = (cfg.synthesis.eta_pcl != 0.0).then_some(report.last.pcl);

        ServerState {
            global,
            retrained_classifier: retrained,
            bank,
            round: state.round + 1,
        }
    } else {
        ServerState {
            retrained_classifier: global.classifier.clone(),
            global,
            bank: state.bank.clone(),
            round: state.round + 1,
        }
    };

    let acc = groupwise_accuracy(
        &next.global.extractor,
        next.retrained_classifier.view(),
        &evaluator.test,
        &evaluator.groups,
    )?;
    metrics.acc_all = acc.all;
    metrics.acc_many = acc.many;
    metrics.acc_medium = acc.medium;
    metrics.acc_few = acc.few;
    if !metrics.is_finite() || !next.global.is_finite() {
        return Err(Error::Numeric(format!("non-finite value in round {}", state.round)));
    }
    Ok((next, metrics))
}

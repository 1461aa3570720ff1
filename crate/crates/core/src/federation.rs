//! Client-side local SGD on a task adapter, and the server-side FedOpt family
//! (FedSGD/FedAvg, FedAdagrad, FedYogi, FedAdam) applied to aggregated
//! client deltas.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{adapter_loss_and_grad, Backbone, TaskAdapter};
use crate::numerics::{euclid_sq, ParamVector, Rng};

/// What one client sends back after local training on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub task_id: usize,
    /// Post-training adapter minus the adapter the client received.
    pub delta: ParamVector,
    pub sample_count: usize,
    pub upload_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Result of a client's local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    /// `‖P_k − P_0‖²` after each epoch `k = 1..K`.
    pub drift_samples: Vec<f64>,
}

/// Run `K` epochs of mini-batch SGD on `start` using the `shard` rows of
/// `data`. Returns `Ok(None)` for an empty shard: the client sits the round out.
///
/// Each epoch reshuffles the shard from `rng`. Rows inside a mini-batch are
/// visited in ascending index order, so a batch's gradient depends only on
/// which rows it holds.
pub fn local_train(
    backbone: &Backbone,
    start: &TaskAdapter,
    data: &Dataset,
    shard: &[usize],
    client_id: usize,
    cfg: &LocalTrainConfig,
    rng: &mut Rng,
) -> Result<Option<LocalOutcome>> {
    if shard.is_empty() {
        return Ok(None);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("local epochs and batch size must be at least 1"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::config(format!("client learning rate must be >= 0, got {}", cfg.lr)));
    }
    let mut adapter = start.clone();
    let mut order = shard.to_vec();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut drift_samples = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend_from_slice(chunk);
            batch.sort_unstable();
            let (_, grad) = adapter_loss_and_grad(
                backbone,
                &adapter,
                batch.iter().map(|&i| (data.x.row(i), data.y[i])),
            )?;
            adapter.params_mut().add_scaled(&grad, -cfg.lr)?;
        }
        drift_samples.push(euclid_sq(adapter.params(), start.params())?);
    }
    let delta = adapter.params().sub(start.params())?;
    let upload_bytes = delta.len() as u64 * 8;
    Ok(Some(LocalOutcome {
        update: ClientUpdate {
            client_id,
            task_id: start.task_id(),
            delta,
            sample_count: shard.len(),
            upload_bytes,
        },
        drift_samples,
    }))
}

/// How client deltas are combined into the pseudo-gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `Σ|D_c|Δ_c / Σ|D_c|`.
    #[default]
    SampleWeighted,
    /// `(1/|S|) ΣΔ_c`.
    UnweightedMean,
    /// `ΣΔ_c`.
    UnweightedSum,
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample_weighted" => Ok(Weighting::SampleWeighted),
            "unweighted_mean" => Ok(Weighting::UnweightedMean),
            "unweighted_sum" => Ok(Weighting::UnweightedSum),
            _ => Err(Error::config(format!("unknown weighting {s:?}"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::SampleWeighted => "sample_weighted",
            Weighting::UnweightedMean => "unweighted_mean",
            Weighting::UnweightedSum => "unweighted_sum",
        })
    }
}

/// Combine one task's client deltas. Summation runs in ascending client id
/// order whatever the arrival order. `Ok(None)` means no updates arrived.
pub fn aggregate_pseudo_gradient(
    updates: &[ClientUpdate],
    weighting: Weighting,
) -> Result<Option<ParamVector>> {
    let Some(first) = updates.first() else {
        return Ok(None);
    };
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for u in &sorted {
        if u.task_id != first.task_id {
            return Err(Error::Layout(format!(
                "updates for tasks {} and {} mixed in one aggregation",
                first.task_id, u.task_id
            )));
        }
        first.delta.check_layout(&u.delta)?;
    }
    let mut acc = ParamVector::zeros(Arc::clone(first.delta.layout()));
    match weighting {
        Weighting::SampleWeighted => {
            let total: usize = sorted.iter().map(|u| u.sample_count).sum();
            if total == 0 {
                return Err(Error::Input("updates carry zero samples".into()));
            }
            for u in &sorted {
                acc.add_scaled(&u.delta, u.sample_count as f64)?;
            }
            acc.scale(1.0 / total as f64);
        }
        Weighting::UnweightedMean => {
            for u in &sorted {
                acc.add_scaled(&u.delta, 1.0)?;
            }
            acc.scale(1.0 / sorted.len() as f64);
        }
        Weighting::UnweightedSum => {
            for u in &sorted {
                acc.add_scaled(&u.delta, 1.0)?;
            }
        }
    }
    Ok(Some(acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ServerKind {
    FedSgd,
    FedAdagrad,
    FedYogi,
    #[default]
    FedAdam,
}

impl ServerKind {
    pub fn is_adaptive(self) -> bool {
        self != ServerKind::FedSgd
    }
}

impl FromStr for ServerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedsgd" | "fedavg" => Ok(ServerKind::FedSgd),
            "fedadagrad" => Ok(ServerKind::FedAdagrad),
            "fedyogi" => Ok(ServerKind::FedYogi),
            "fedadam" => Ok(ServerKind::FedAdam),
            _ => Err(Error::config(format!("unknown server optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for ServerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServerKind::FedSgd => "fedsgd",
            ServerKind::FedAdagrad => "fedadagrad",
            ServerKind::FedYogi => "fedyogi",
            ServerKind::FedAdam => "fedadam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerHyper {
    pub kind: ServerKind,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl ServerHyper {
    /// Defaults for `kind`: `β1 = 0.9` for adaptive kinds and 0 for FedSGD,
    /// `β2 = 0.99`, `τ = 1e-3`.
    pub fn defaults(kind: ServerKind, eta: f64) -> Self {
        ServerHyper {
            kind,
            eta,
            beta1: if kind.is_adaptive() { 0.9 } else { 0.0 },
            beta2: 0.99,
            tau: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config(format!("server_lr must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(format!("beta1 must lie in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!("beta2 must lie in [0, 1), got {}", self.beta2)));
        }
        if self.kind.is_adaptive() && !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "tau must be > 0 for {}, got {}",
                self.kind, self.tau
            )));
        }
        Ok(())
    }
}

/// Per-task moments of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMoments {
    pub momentum: ParamVector,
    /// Second moment; unused (left at its initial value) for FedSGD.
    pub second: ParamVector,
}

/// Server optimizer state: hyperparameters plus moments per task. Moments
/// are created on a task's first step and persist while it is dormant.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerOptState {
    hyper: ServerHyper,
    moments: BTreeMap<usize, TaskMoments>,
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One second-moment update for a single coordinate.
pub fn second_moment(kind: ServerKind, beta2: f64, v: f64, delta: f64) -> f64 {
    let d2 = delta * delta;
    match kind {
        ServerKind::FedSgd => v,
        ServerKind::FedAdagrad => v + d2,
        ServerKind::FedYogi => v - (1.0 - beta2) * d2 * sign(v - d2),
        ServerKind::FedAdam => beta2 * v + (1.0 - beta2) * d2,
    }
}

impl ServerOptState {
    pub fn new(hyper: ServerHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(ServerOptState {
            hyper,
            moments: BTreeMap::new(),
        })
    }

    pub fn hyper(&self) -> &ServerHyper {
        &self.hyper
    }

    pub fn moments(&self, task: usize) -> Option<&TaskMoments> {
        self.moments.get(&task)
    }

    /// Apply one server step for `task` with pseudo-gradient `g`:
    ///
    /// ```text
    /// Δ ← β1·Δ + (1−β1)·g
    /// fedsgd:   P ← P + η·Δ
    /// adaptive: v ← rule(v, Δ);  P ← P + η·Δ/(√v + τ)
    /// ```
    pub fn step(&mut self, task: usize, server_adapter: &mut ParamVector, g: &ParamVector) -> Result<()> {
        server_adapter.check_layout(g)?;
        let h = self.hyper;
        let m = self.moments.entry(task).or_insert_with(|| TaskMoments {
            momentum: ParamVector::zeros(Arc::clone(g.layout())),
            second: ParamVector::filled(Arc::clone(g.layout()), h.tau * h.tau),
        });
        m.momentum.check_layout(g)?;
        let p = server_adapter.as_mut_slice();
        let mom = m.momentum.as_mut_slice();
        let v = m.second.as_mut_slice();
        for i in 0..p.len() {
            mom[i] = h.beta1 * mom[i] + (1.0 - h.beta1) * g.as_slice()[i];
            if h.kind.is_adaptive() {
                v[i] = second_moment(h.kind, h.beta2, v[i], mom[i]);
                debug_assert!(v[i] >= 0.0);
                p[i] += h.eta * mom[i] / (v[i].sqrt() + h.tau);
            } else {
                p[i] += h.eta * mom[i];
            }
        }
        Ok(())
    }
}

/// Free-function form of [`ServerOptState::step`].
pub fn server_step(
    state: &mut ServerOptState,
    server_adapter: &mut ParamVector,
    task: usize,
    g: &ParamVector,
) -> Result<()> {
    state.step(task, server_adapter, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StragglerPolicy {
    drop_prob: f64,
}

impl StragglerPolicy {
    pub fn new(drop_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_prob) {
            return Err(Error::config(format!("drop_prob must lie in [0, 1], got {drop_prob}")));
        }
        Ok(StragglerPolicy { drop_prob })
    }

    pub fn drop_prob(&self) -> f64 {
        self.drop_prob
    }
}

/// Drop each client independently with probability `drop_prob`; one draw per
/// client in list order.
pub fn apply_stragglers(participants: &[usize], policy: &StragglerPolicy, rng: &mut Rng) -> Vec<usize> {
    participants
        .iter()
        .copied()
        .filter(|_| rng.uniform() >= policy.drop_prob)
        .collect()
}

/// Bytes moved in one round: `(client→server, server→client)`. Every client
/// that uploads received exactly one adapter of `broadcast_param_count`
/// scalars.
pub fn comm_bytes(round_updates: &[ClientUpdate], broadcast_param_count: usize) -> (u64, u64) {
    let c2s = round_updates.iter().map(|u| u.upload_bytes).sum();
    let mut recipients: Vec<usize> = round_updates.iter().map(|u| u.client_id).collect();
    recipients.sort_unstable();
    recipients.dedup();
    let s2c = broadcast_param_count as u64 * 8 * recipients.len() as u64;
    (c2s, s2c)
}

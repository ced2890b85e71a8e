//! Local training, Federated Averaging of federated parameters, private
//! parameter updates, and round orchestration.

mod runner;
mod store;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingInput, Model, Sample, EMBEDDING_TABLE, PRIVATE_EMBEDDING};
use crate::seed;
use crate::tensor::{ParamSet, Tensor};

pub use runner::{
    evaluate, run_centralized, run_fl, CentralizedOutput, EvalPoint, FlOutput, Split, TrainingData, UserData,
};
pub(crate) use runner::{faithful_aggregate, Aggregator, FlSimulation};
pub use store::{
    read_metrics_csv, write_metrics_csv, CheckpointConfig, ClientRecord, ClientStore, MetricsRow,
    ServerCheckpoint, CHECKPOINT_FORMAT_VERSION, METRICS_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GlobalServer,
    PersonalizedServer,
    GlobalFl,
    PersonalizedFl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::GlobalServer,
        Mode::PersonalizedServer,
        Mode::GlobalFl,
        Mode::PersonalizedFl,
    ];

    pub fn personalized(self) -> bool {
        matches!(self, Mode::PersonalizedServer | Mode::PersonalizedFl)
    }

    pub fn federated(self) -> bool {
        matches!(self, Mode::GlobalFl | Mode::PersonalizedFl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::GlobalServer => "global_server",
            Mode::PersonalizedServer => "personalized_server",
            Mode::GlobalFl => "global_fl",
            Mode::PersonalizedFl => "personalized_fl",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a participant's private delta is folded back in after a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivateRule {
    /// `w + (c_i / Σc) · delta`, what plain Federated Averaging over the
    /// full embedding table would do.
    Scaled,
    /// `w + delta`: keep the locally trained value.
    Retain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub users_per_round: usize,
    /// Passes over a client's data per round.
    pub local_epochs: usize,
    /// Rounds for FL modes, epochs for server modes.
    pub rounds_or_epochs: usize,
    pub lr: f64,
    /// Learning rate for embeddings; defaults to `lr`.
    pub private_lr: Option<f64>,
    pub batch_size: usize,
    pub private_update: PrivateRule,
    pub seed: u64,
    /// Evaluate every this many rounds (FL) or epochs (server), plus the
    /// initial state and the final round.
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PersonalizedFl,
            users_per_round: 10,
            local_epochs: 1,
            rounds_or_epochs: 400,
            lr: 0.3,
            private_lr: None,
            batch_size: 8,
            private_update: PrivateRule::Retain,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rate_ok(self.lr) || !self.private_lr.map_or(true, rate_ok) {
            return Err(Error::contract("learning rates must be finite and non-negative"));
        }
        if self.users_per_round == 0 || self.batch_size == 0 || self.local_epochs == 0 || self.eval_every == 0 {
            return Err(Error::contract(
                "users_per_round, batch_size, local_epochs and eval_every must be positive",
            ));
        }
        Ok(())
    }

    pub fn private_lr(&self) -> f64 {
        self.private_lr.unwrap_or(self.lr)
    }
}

/// The federated half of a client's result. This is all the server sees.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedUpdate {
    pub client_id: usize,
    pub delta: ParamSet,
    pub num_examples: usize,
}

/// Output of one client's local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta_federated: ParamSet,
    pub delta_private: Tensor,
    pub num_examples: usize,
}

impl ClientUpdate {
    /// Splits off the part sent to the server; the private delta stays.
    pub fn into_parts(self) -> (FederatedUpdate, Tensor) {
        (
            FederatedUpdate {
                client_id: self.client_id,
                delta: self.delta_federated,
                num_examples: self.num_examples,
            },
            self.delta_private,
        )
    }

    pub fn federated_part(&self) -> FederatedUpdate {
        FederatedUpdate {
            client_id: self.client_id,
            delta: self.delta_federated.clone(),
            num_examples: self.num_examples,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub w_f: ParamSet,
    pub round: usize,
}

/// How the embedding enters the graph during SGD over a parameter set.
#[derive(Clone, Copy, Debug)]
pub(crate) enum EmbeddingSlot {
    /// Zero constant; no embedding parameter.
    Frozen,
    /// `PRIVATE_EMBEDDING` is the last entry of the parameter set.
    Private,
    /// `EMBEDDING_TABLE` is the last entry; rows are selected per example.
    Table,
}

fn is_embedding(name: &str) -> bool {
    name == PRIVATE_EMBEDDING || name == EMBEDDING_TABLE
}

/// One minibatch SGD step on `params` (federated entries first, in model
/// layout order, then the embedding per `slot`). `rows` gives the table row
/// of each sample and is ignored for other slots. Returns the batch loss.
pub(crate) fn sgd_step(
    model: &Model,
    params: &mut ParamSet,
    slot: EmbeddingSlot,
    batch: &[&Sample],
    rows: &[usize],
    lr: f64,
    private_lr: f64,
) -> Result<f64> {
    let mut g = crate::autodiff::Graph::new();
    let ids = g.params_from(params)?;
    let n_fed = match slot {
        EmbeddingSlot::Frozen => ids.len(),
        EmbeddingSlot::Private | EmbeddingSlot::Table => ids.len() - 1,
    };
    let zero = g.constant(Tensor::zeros(&[model.config().embed_dim]));
    let embedding = |k: usize| match slot {
        EmbeddingSlot::Frozen => EmbeddingInput::Vector(zero),
        EmbeddingSlot::Private => EmbeddingInput::Vector(ids[n_fed]),
        EmbeddingSlot::Table => EmbeddingInput::TableRow(ids[n_fed], rows[k]),
    };
    let root = model.batch_loss(&mut g, &ids[..n_fed], embedding, batch)?;
    let loss = g.value(root).values()[0];
    let grads = g.backward(root)?;
    for ((name, w), (_, dw)) in params.iter_mut().zip(grads.iter()) {
        let rate = if is_embedding(name) { private_lr } else { lr };
        for (wi, gi) in w.values_mut().iter_mut().zip(dw.values()) {
            *wi -= rate * gi;
        }
    }
    Ok(loss)
}

/// Runs `cfg.local_epochs` of shuffled minibatch SGD over one client's data.
/// The shuffle is seeded by `(cfg.seed, round, client_id, epoch)`.
pub(crate) fn train_client_params(
    model: &Model,
    params: &mut ParamSet,
    slot: EmbeddingSlot,
    data: &[Sample],
    cfg: &RunConfig,
    round: usize,
    client_id: usize,
) -> Result<()> {
    let rows = vec![client_id; cfg.batch_size];
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(
            "local-shuffle",
            &[cfg.seed, round as u64, client_id as u64, epoch as u64],
        ));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            sgd_step(model, params, slot, &batch, &rows[..batch.len()], cfg.lr, cfg.private_lr())?;
        }
    }
    Ok(())
}

/// Trains a copy of `(w_f, w_p)` on one client's data and returns the
/// deltas. Returns `None` (and logs a warning) when the client has no data.
pub fn local_train(
    model: &Model,
    w_f: &ParamSet,
    w_p: &Tensor,
    data: &[Sample],
    cfg: &RunConfig,
    round: usize,
    client_id: usize,
) -> Result<Option<ClientUpdate>> {
    if data.is_empty() {
        log::warn!("client {client_id} has no training data; skipped in round {round}");
        return Ok(None);
    }
    let personalized = model.config().personalized;
    let mut local = w_f.clone();
    let slot = if personalized {
        local.insert(PRIVATE_EMBEDDING, w_p.clone())?;
        EmbeddingSlot::Private
    } else {
        EmbeddingSlot::Frozen
    };
    train_client_params(model, &mut local, slot, data, cfg, round, client_id)?;

    let delta_private = match local.remove(PRIVATE_EMBEDDING) {
        Some(u_p) => u_p.sub(w_p)?,
        None => Tensor::zeros(&[model.config().embed_dim]),
    };
    Ok(Some(ClientUpdate {
        client_id,
        delta_federated: local.sub(w_f)?,
        delta_private,
        num_examples: data.len(),
    }))
}

/// Example-weighted Federated Averaging in delta form:
/// `w + Σ_i (c_i / Σc) · delta_i`, summed in ascending client order.
pub fn aggregate_federated(w_f: &ParamSet, updates: &[FederatedUpdate]) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    let mut sorted: Vec<&FederatedUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::contract("duplicate client id in aggregation"));
    }
    if let Some(bad) = sorted.iter().find(|u| !u.delta.same_layout(w_f)) {
        return Err(Error::contract(format!(
            "update from client {} does not match the federated layout",
            bad.client_id
        )));
    }
    let total: usize = sorted.iter().map(|u| u.num_examples).sum();
    if total == 0 {
        return Err(Error::Aggregation("total example count is zero".into()));
    }
    let weights: Vec<f64> = sorted
        .iter()
        .map(|u| u.num_examples as f64 / total as f64)
        .collect();

    let mut out = w_f.clone();
    for (pi, (_, w)) in out.iter_mut().enumerate() {
        let mut acc = vec![0.0; w.len()];
        for (u, z) in sorted.iter().zip(&weights) {
            let d = u.delta.iter().nth(pi).expect("layout checked").1.values();
            for (a, di) in acc.iter_mut().zip(d) {
                *a += di * z;
            }
        }
        for (wi, a) in w.values_mut().iter_mut().zip(acc) {
            *wi += a;
        }
    }
    if !out.is_finite() {
        return Err(Error::Aggregation("aggregated parameters are not finite".into()));
    }
    Ok(out)
}

/// New private value for one participant.
///
/// `Scaled` applies `z_i = c_i / c_total` with the same arithmetic as
/// [`aggregate_federated`]; `Retain` applies the delta unscaled.
pub fn update_private(w_p: &Tensor, delta: &Tensor, c_i: usize, c_total: usize, rule: PrivateRule) -> Result<Tensor> {
    if c_i == 0 || c_total < c_i {
        return Err(Error::contract(format!(
            "update_private needs c_total >= c_i >= 1, got c_i={c_i}, c_total={c_total}"
        )));
    }
    if w_p.shape() != delta.shape() {
        return Err(Error::dim(
            "update_private",
            format!("{:?} vs {:?}", w_p.shape(), delta.shape()),
        ));
    }
    let z = match rule {
        PrivateRule::Scaled => c_i as f64 / c_total as f64,
        PrivateRule::Retain => 1.0,
    };
    // The accumulator starts at +0.0 exactly as in aggregate_federated, so
    // both paths round identically.
    let values = w_p
        .values()
        .iter()
        .zip(delta.values())
        .map(|(w, d)| w + (0.0 + d * z))
        .collect();
    Tensor::new(w_p.shape().to_vec(), values)
}

/// New private values for every participant of a round. `embeddings[k]`
/// is the current value for `updates[k]`; `c_total` sums over the round.
pub fn update_participants(embeddings: &[Tensor], updates: &[ClientUpdate], rule: PrivateRule) -> Result<Vec<Tensor>> {
    if embeddings.len() != updates.len() {
        return Err(Error::contract("one embedding per participant is required"));
    }
    let c_total: usize = updates.iter().map(|u| u.num_examples).sum();
    embeddings
        .iter()
        .zip(updates)
        .map(|(w, u)| update_private(w, &u.delta_private, u.num_examples, c_total, rule))
        .collect()
}

/// `k` distinct users drawn uniformly without replacement, sorted.
pub fn sample_clients(n_users: usize, k: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n_users {
        return Err(Error::contract(format!(
            "cannot sample {k} clients from {n_users} users"
        )));
    }
    let mut rng = seed::rng("sample-clients", &[seed, round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n_users, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

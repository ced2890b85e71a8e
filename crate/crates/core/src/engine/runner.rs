use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    aggregate_federated, local_train, sample_clients, sgd_step, update_participants, ClientStore, ClientUpdate,
    EmbeddingSlot, GlobalState, RunConfig,
};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, EvalResult, Metric};
use crate::model::{featurize, Model, ModelConfig, Sample, EMBEDDING_TABLE};
use crate::seed;
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Debug)]
pub struct UserData {
    pub user_id: String,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Featurized per-user splits, indexed by user ordinal.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub users: Vec<UserData>,
}

impl TrainingData {
    pub fn from_split(split: &DatasetSplit, cfg: &ModelConfig) -> Result<Self> {
        let labels = cfg.label_cardinality();
        let convert = |part: &[crate::data::Example]| {
            part.iter()
                .map(|e| {
                    if e.label as usize >= labels {
                        return Err(Error::contract(format!(
                            "user {:?} has label {} but the model has {labels} classes",
                            e.user_id, e.label
                        )));
                    }
                    Ok(Sample {
                        features: featurize(&e.text, cfg),
                        label: e.label,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let users = split
            .users
            .iter()
            .map(|u| {
                Ok(UserData {
                    user_id: u.user_id.clone(),
                    train: convert(&u.train)?,
                    eval: convert(&u.eval)?,
                    test: convert(&u.test)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { users })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn train_len(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Eval,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

/// Micro-averaged metrics over the pooled examples of every user.
///
/// `embedding_of` supplies each user's embedding by ordinal.
pub fn evaluate<F>(model: &Model, w_f: &ParamSet, embedding_of: F, data: &TrainingData, split: Split) -> Result<Vec<EvalResult>>
where
    F: Fn(usize) -> Tensor,
{
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for (u, user) in data.users.iter().enumerate() {
        let samples = match split {
            Split::Eval => &user.eval,
            Split::Test => &user.test,
        };
        if samples.is_empty() {
            continue;
        }
        let xs: Vec<_> = samples.iter().map(|s| s.features.clone()).collect();
        logits.extend(model.predict_many(w_f, &embedding_of(u), &xs)?);
        labels.extend(samples.iter().map(|s| s.label));
    }
    let n = labels.len();
    if n == 0 {
        log::warn!("no {} examples to evaluate", split.as_str());
        return Ok(Vec::new());
    }
    let result = |metric, value| EvalResult {
        metric,
        value,
        split: split.as_str().to_owned(),
        n_examples: n,
    };

    let loss = logits
        .iter()
        .zip(&labels)
        .map(|(z, &y)| example_loss(model, z, y))
        .sum::<f64>()
        / n as f64;
    let mut out = Vec::new();
    if model.config().is_binary() {
        let scores: Vec<f64> = logits.iter().map(|z| z.values()[0]).collect();
        match auc(&scores, &labels) {
            Ok(v) => out.push(result(Metric::Auc, v)),
            Err(Error::UndefinedMetric(why)) => log::warn!("skipping auc: {why}"),
            Err(e) => return Err(e),
        }
        let preds: Vec<u32> = scores.iter().map(|&s| u32::from(s > 0.0)).collect();
        out.push(result(Metric::Accuracy, accuracy(&preds, &labels)?));
    } else {
        let preds: Vec<u32> = logits.iter().map(|z| argmax(z.values())).collect();
        out.push(result(Metric::Accuracy, accuracy(&preds, &labels)?));
    }
    out.push(result(Metric::Loss, loss));
    Ok(out)
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best as u32
}

fn example_loss(model: &Model, logits: &Tensor, label: u32) -> f64 {
    let mut g = crate::autodiff::Graph::new();
    let z = g.constant(logits.clone());
    let l = model.example_loss(&mut g, z, label).expect("labels validated on load");
    g.value(l).values()[0]
}

/// Evaluation snapshot after `round` rounds (FL) or epochs (server).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub round: usize,
    /// Training samples processed so far divided by the training-set size.
    pub epoch: f64,
    pub results: Vec<EvalResult>,
}

impl EvalPoint {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.results.iter().find(|r| r.metric == metric).map(|r| r.value)
    }
}

fn model_for(model_cfg: &ModelConfig, cfg: &RunConfig) -> Result<Model> {
    Model::new(ModelConfig {
        personalized: cfg.mode.personalized(),
        ..model_cfg.clone()
    })
}

fn due(round: usize, total: usize, every: usize) -> bool {
    round % every == 0 || round == total
}

pub(crate) type Aggregator = fn(&ParamSet, &[ClientUpdate]) -> Result<ParamSet>;

pub(crate) fn faithful_aggregate(w_f: &ParamSet, updates: &[ClientUpdate]) -> Result<ParamSet> {
    let federated: Vec<_> = updates.iter().map(ClientUpdate::federated_part).collect();
    aggregate_federated(w_f, &federated)
}

/// Round-by-round federated training state.
pub(crate) struct FlSimulation<'a> {
    pub model: Model,
    pub data: &'a TrainingData,
    pub cfg: RunConfig,
    pub state: GlobalState,
    pub store: ClientStore,
    pub samples_seen: usize,
    pub warnings: Vec<String>,
    pub aggregator: Aggregator,
}

impl<'a> FlSimulation<'a> {
    pub fn new(model_cfg: &ModelConfig, data: &'a TrainingData, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.mode.federated() {
            return Err(Error::contract(format!("{} is not a federated mode", cfg.mode)));
        }
        if cfg.users_per_round > data.n_users() {
            return Err(Error::contract(format!(
                "users_per_round ({}) exceeds the number of users ({})",
                cfg.users_per_round,
                data.n_users()
            )));
        }
        let model = model_for(model_cfg, cfg)?;
        let w_f = model.init_federated(cfg.seed);
        Ok(Self {
            model,
            data,
            cfg: cfg.clone(),
            state: GlobalState { w_f, round: 0 },
            store: ClientStore::default(),
            samples_seen: 0,
            warnings: Vec::new(),
            aggregator: faithful_aggregate,
        })
    }

    /// Current private value for user `u`: the stored one, or the default.
    pub fn embedding(&self, u: usize) -> Tensor {
        let user = &self.data.users[u].user_id;
        match self.store.get(user) {
            Some(rec) => rec.embedding.clone(),
            None => self.model.init_embedding(self.cfg.seed, u),
        }
    }

    /// Runs one round: sample, train locally, aggregate, update privates.
    pub fn step(&mut self) -> Result<Vec<ClientUpdate>> {
        let t = self.state.round;
        let clients = sample_clients(self.data.n_users(), self.cfg.users_per_round, t, self.cfg.seed)?;
        let results: Vec<Option<ClientUpdate>> = clients
            .par_iter()
            .map(|&c| {
                let w_p = self.embedding(c);
                local_train(&self.model, &self.state.w_f, &w_p, &self.data.users[c].train, &self.cfg, t, c)
            })
            .collect::<Result<_>>()?;
        for (c, r) in clients.iter().zip(&results) {
            if r.is_none() {
                self.warnings.push(format!(
                    "round {}: user {} has no training data and was skipped",
                    t + 1,
                    self.data.users[*c].user_id
                ));
            }
        }
        let mut updates: Vec<ClientUpdate> = results.into_iter().flatten().collect();
        updates.sort_by_key(|u| u.client_id);
        if updates.is_empty() {
            self.state.round += 1;
            return Ok(updates);
        }

        let w_next = (self.aggregator)(&self.state.w_f, &updates)?;
        if self.model.config().personalized {
            let current: Vec<Tensor> = updates.iter().map(|u| self.embedding(u.client_id)).collect();
            let next = update_participants(&current, &updates, self.cfg.private_update)?;
            for (u, w_p) in updates.iter().zip(next) {
                let user = self.data.users[u.client_id].user_id.clone();
                self.store.put(user, w_p, t + 1);
            }
        }
        self.samples_seen += updates.iter().map(|u| u.num_examples * self.cfg.local_epochs).sum::<usize>();
        self.state = GlobalState {
            w_f: w_next,
            round: t + 1,
        };
        Ok(updates)
    }

    fn evaluate(&self) -> Result<EvalPoint> {
        let results = evaluate(&self.model, &self.state.w_f, |u| self.embedding(u), self.data, Split::Eval)?;
        Ok(EvalPoint {
            round: self.state.round,
            epoch: self.samples_seen as f64 / self.data.train_len().max(1) as f64,
            results,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FlOutput {
    pub state: GlobalState,
    pub store: ClientStore,
    pub history: Vec<EvalPoint>,
    pub warnings: Vec<String>,
}

/// Federated training: each round samples clients, trains them locally,
/// averages federated deltas on the server and keeps private values on
/// the clients.
pub fn run_fl(model_cfg: &ModelConfig, data: &TrainingData, cfg: &RunConfig) -> Result<FlOutput> {
    let mut sim = FlSimulation::new(model_cfg, data, cfg)?;
    let total = cfg.rounds_or_epochs;
    let mut history = Vec::new();
    if total > 0 {
        history.push(sim.evaluate()?);
    }
    for _ in 0..total {
        sim.step()?;
        let r = sim.state.round;
        if due(r, total, cfg.eval_every) {
            let point = sim.evaluate()?;
            log::info!("{} round {r}: {:?}", cfg.mode, point.get(crate::metrics::Metric::Accuracy));
            history.push(point);
        }
    }
    Ok(FlOutput {
        state: sim.state,
        store: sim.store,
        history,
        warnings: sim.warnings,
    })
}

#[derive(Clone, Debug)]
pub struct CentralizedOutput {
    pub w_f: ParamSet,
    /// `[U, D]` table in personalized mode.
    pub embeddings: Option<Tensor>,
    pub history: Vec<EvalPoint>,
}

impl CentralizedOutput {
    pub fn embedding_map(&self, data: &TrainingData) -> BTreeMap<String, Tensor> {
        let Some(table) = &self.embeddings else {
            return BTreeMap::new();
        };
        data.users
            .iter()
            .enumerate()
            .map(|(u, user)| {
                let row = table.row(u).expect("one row per user").to_vec();
                (user.user_id.clone(), Tensor::vector(row))
            })
            .collect()
    }
}

/// Pooled minibatch SGD over every user's training data.
pub fn run_centralized(model_cfg: &ModelConfig, data: &TrainingData, cfg: &RunConfig) -> Result<CentralizedOutput> {
    cfg.validate()?;
    if cfg.mode.federated() {
        return Err(Error::contract(format!("{} is not a server mode", cfg.mode)));
    }
    let model = model_for(model_cfg, cfg)?;
    let personalized = model.config().personalized;
    let mut params = model.init_federated(cfg.seed);
    let slot = if personalized {
        params.insert(EMBEDDING_TABLE, model.init_embedding_table(cfg.seed, data.n_users()))?;
        EmbeddingSlot::Table
    } else {
        EmbeddingSlot::Frozen
    };

    let pool: Vec<(usize, usize)> = data
        .users
        .iter()
        .enumerate()
        .flat_map(|(u, user)| (0..user.train.len()).map(move |k| (u, k)))
        .collect();

    let eval = |params: &ParamSet, epoch: usize| -> Result<EvalPoint> {
        let mut w_f = params.clone();
        let table = w_f.remove(EMBEDDING_TABLE);
        let embedding_of = |u: usize| match &table {
            Some(t) => Tensor::vector(t.row(u).expect("one row per user").to_vec()),
            None => Tensor::zeros(&[model.config().embed_dim]),
        };
        Ok(EvalPoint {
            round: epoch,
            epoch: epoch as f64,
            results: evaluate(&model, &w_f, embedding_of, data, Split::Eval)?,
        })
    };

    let total = cfg.rounds_or_epochs;
    let mut history = Vec::new();
    if total > 0 {
        history.push(eval(&params, 0)?);
    }
    for epoch in 0..total {
        let mut order = pool.clone();
        order.shuffle(&mut seed::rng("central-shuffle", &[cfg.seed, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&(u, k)| &data.users[u].train[k]).collect();
            let rows: Vec<usize> = chunk.iter().map(|&(u, _)| u).collect();
            sgd_step(&model, &mut params, slot, &batch, &rows, cfg.lr, cfg.private_lr())?;
        }
        if due(epoch + 1, total, cfg.eval_every) {
            let point = eval(&params, epoch + 1)?;
            log::info!("{} epoch {}: {:?}", cfg.mode, epoch + 1, point.get(Metric::Accuracy));
            history.push(point);
        }
    }
    let embeddings = params.remove(EMBEDDING_TABLE);
    Ok(CentralizedOutput {
        w_f: params,
        embeddings,
        history,
    })
}

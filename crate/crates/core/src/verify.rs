//! Executable checks of the split-parameter training contract:
//!
//! * a user's local loss has exactly zero gradient on any other user's
//!   embedding;
//! * the federated aggregate never depends on private values, and a
//!   user's private update depends only on that user's own values;
//! * split training with the scaled private rule is identical to plain
//!   Federated Averaging over a model that federates the whole embedding
//!   table.

use std::fmt;

use rand::Rng;

use crate::autodiff::Graph;
use crate::data::{generate_synthetic, split_dataset, SyntheticSpec};
use crate::engine::{
    aggregate_federated, faithful_aggregate, sample_clients, train_client_params, update_participants, Aggregator,
    ClientUpdate, EmbeddingSlot, FederatedUpdate, FlSimulation, Mode, PrivateRule, RunConfig, TrainingData,
};
use crate::error::{Error, Result};
use crate::model::{EmbeddingInput, Model, ModelConfig, Sample, EMBEDDING_TABLE};
use crate::seed;
use crate::tensor::{ParamSet, Tensor};

pub const CROSS_GRADIENT_TOLERANCE: f64 = 0.0;
pub const INDEPENDENCE_TOLERANCE: f64 = 0.0;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub name: String,
    pub max_abs_deviation: f64,
    pub pass: bool,
    pub details: String,
}

impl VerificationReport {
    fn new(name: &str, max_abs_deviation: f64, tolerance: f64, details: String) -> Self {
        Self {
            name: name.to_owned(),
            max_abs_deviation,
            pass: max_abs_deviation <= tolerance,
            details,
        }
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CHECK {} max_dev={:e} {}",
            self.name,
            self.max_abs_deviation,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

fn personalized_model(cfg: &ModelConfig) -> Result<Model> {
    Model::new(ModelConfig {
        personalized: true,
        ..cfg.clone()
    })
}

/// Federated parameters followed by the full `[U, D]` embedding table.
fn full_table_params(model: &Model, seed: u64, n_users: usize) -> Result<ParamSet> {
    let mut params = model.init_federated(seed);
    params.insert(EMBEDDING_TABLE, model.init_embedding_table(seed, n_users))?;
    Ok(params)
}

fn table_loss(model: &Model, params: &ParamSet, user: usize, batch: &[&Sample]) -> Result<(Graph, crate::autodiff::NodeId)> {
    let mut g = Graph::new();
    let ids = g.params_from(params)?;
    let n_fed = ids.len() - 1;
    let table = ids[n_fed];
    let root = model.batch_loss(&mut g, &ids[..n_fed], |_| EmbeddingInput::TableRow(table, user), batch)?;
    Ok((g, root))
}

fn check_users(data: &TrainingData, i: usize, j: usize) -> Result<()> {
    let n = data.n_users();
    if i >= n || j >= n {
        return Err(Error::Bounds {
            what: "users",
            index: i.max(j),
            len: n,
        });
    }
    if data.users[i].train.is_empty() {
        return Err(Error::contract(format!("user {i} has no training data")));
    }
    Ok(())
}

/// Gradient of user `i`'s local loss with respect to table row `row`,
/// with the whole table as a leaf.
pub fn table_row_gradient(model_cfg: &ModelConfig, data: &TrainingData, i: usize, row: usize, seed: u64) -> Result<Vec<f64>> {
    check_users(data, i, row)?;
    let model = personalized_model(model_cfg)?;
    let params = full_table_params(&model, seed, data.n_users())?;
    let batch: Vec<&Sample> = data.users[i].train.iter().collect();
    let (g, root) = table_loss(&model, &params, i, &batch)?;
    let grads = g.backward(root)?;
    let table = grads.get(EMBEDDING_TABLE).expect("table is a leaf");
    Ok(table.row(row)?.to_vec())
}

/// Central-difference estimate of the same gradient row.
pub fn table_row_finite_difference(
    model_cfg: &ModelConfig,
    data: &TrainingData,
    i: usize,
    row: usize,
    seed: u64,
    eps: f64,
) -> Result<Vec<f64>> {
    check_users(data, i, row)?;
    if !(eps > 0.0) {
        return Err(Error::contract("eps must be positive"));
    }
    let model = personalized_model(model_cfg)?;
    let params = full_table_params(&model, seed, data.n_users())?;
    let batch: Vec<&Sample> = data.users[i].train.iter().collect();
    let d = model.config().embed_dim;
    let loss_at = |k: usize, shift: f64| -> Result<f64> {
        let mut p = params.clone();
        p.get_mut(EMBEDDING_TABLE).expect("table present").values_mut()[row * d + k] += shift;
        let (g, root) = table_loss(&model, &p, i, &batch)?;
        Ok(g.value(root).values()[0])
    };
    (0..d)
        .map(|k| Ok((loss_at(k, eps)? - loss_at(k, -eps)?) / (2.0 * eps)))
        .collect()
}

/// Builds user `i`'s local loss over the full embedding table and reports
/// the largest gradient magnitude on row `j`. Exact zero is required.
pub fn check_zero_cross_gradient(
    model_cfg: &ModelConfig,
    data: &TrainingData,
    i: usize,
    j: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if i == j {
        return Err(Error::contract("cross-gradient check needs two different users"));
    }
    let grad = table_row_gradient(model_cfg, data, i, j, seed)?;
    let dev = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(VerificationReport::new(
        "zero_cross_gradient",
        dev,
        CROSS_GRADIENT_TOLERANCE,
        format!("max |dL_{i}/dw_p^{j}| over {} coordinates", grad.len()),
    ))
}

fn max_dev_sets(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let dev = a.max_abs_diff(b)?;
    let bits_differ = a
        .iter()
        .zip(b.iter())
        .any(|((_, x), (_, y))| x.values().iter().zip(y.values()).any(|(p, q)| p.to_bits() != q.to_bits()));
    // A sign-of-zero difference still counts as a deviation.
    Ok(if bits_differ && dev == 0.0 { f64::MIN_POSITIVE } else { dev })
}

fn max_dev_tensors(a: &Tensor, b: &Tensor) -> Result<f64> {
    let dev = a.max_abs_diff(b)?;
    let bits_differ = a.values().iter().zip(b.values()).any(|(p, q)| p.to_bits() != q.to_bits());
    Ok(if bits_differ && dev == 0.0 { f64::MIN_POSITIVE } else { dev })
}

fn random_like(set: &ParamSet, rng: &mut impl Rng) -> ParamSet {
    let mut out = set.zeros_like();
    for (_, t) in out.iter_mut() {
        for v in t.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    out
}

fn random_vector(d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Randomized structural checks of the aggregation step.
///
/// (a) Perturbing every client's private delta must leave the federated
/// aggregate bitwise unchanged. (b) Perturbing the federated parameters and
/// every other participant's private value and delta must leave user `i`'s
/// private update bitwise unchanged. As a sanity inversion, perturbing user
/// `i`'s own delta must change it.
pub fn check_aggregation_independence(seed: u64) -> Result<VerificationReport> {
    check_aggregation_independence_with(seed, faithful_aggregate)
}

pub(crate) fn check_aggregation_independence_with(seed: u64, aggregator: Aggregator) -> Result<VerificationReport> {
    let mut rng = seed::rng("verify-aggregation", &[seed]);
    let cfg = ModelConfig {
        hash_dim: 16,
        hidden_dims: vec![4],
        head_hidden_dims: vec![4],
        embed_dim: 3,
        num_classes: 2,
        ..ModelConfig::default()
    };
    let model = personalized_model(&cfg)?;
    let d = cfg.embed_dim;
    let w_f = model.init_federated(seed);
    let n = rng.gen_range(2..=6);
    let updates: Vec<ClientUpdate> = (0..n)
        .map(|k| ClientUpdate {
            client_id: 3 * k + rng.gen_range(0..3),
            delta_federated: random_like(&w_f, &mut rng),
            delta_private: random_vector(d, &mut rng),
            num_examples: rng.gen_range(1..50),
        })
        .collect();
    let embeddings: Vec<Tensor> = (0..n).map(|_| random_vector(d, &mut rng)).collect();
    let rule = if rng.gen_bool(0.5) { PrivateRule::Scaled } else { PrivateRule::Retain };

    // (a)
    let base = aggregator(&w_f, &updates)?;
    let mut perturbed = updates.clone();
    for u in &mut perturbed {
        u.delta_private = random_vector(d, &mut rng);
    }
    let dev_a = max_dev_sets(&base, &aggregator(&w_f, &perturbed)?)?;

    // (b)
    let i = rng.gen_range(0..n);
    let before = update_participants(&embeddings, &updates, rule)?;
    let w_f_shifted = random_like(&w_f, &mut rng);
    let mut others = updates.clone();
    let mut other_embeddings = embeddings.clone();
    for k in (0..n).filter(|&k| k != i) {
        others[k].delta_private = random_vector(d, &mut rng);
        others[k].delta_federated = random_like(&w_f, &mut rng);
        other_embeddings[k] = random_vector(d, &mut rng);
    }
    // The federated state is not an input to the private update; shifting
    // it exercises the round as a whole.
    let _ = aggregator(&w_f_shifted, &others)?;
    let after = update_participants(&other_embeddings, &others, rule)?;
    let dev_b = max_dev_tensors(&before[i], &after[i])?;

    let mut own = updates.clone();
    own[i].delta_private = random_vector(d, &mut rng);
    let changed = update_participants(&embeddings, &own, rule)?;
    let inversion = max_dev_tensors(&before[i], &changed[i])?;
    if inversion == 0.0 {
        return Err(Error::contract(
            "sanity inversion failed: user's own delta did not affect its update",
        ));
    }

    Ok(VerificationReport::new(
        "aggregation_independence",
        dev_a.max(dev_b),
        INDEPENDENCE_TOLERANCE,
        format!("{n} clients, rule {rule:?}: aggregate dev {dev_a:e}, private update dev {dev_b:e}, own-delta change {inversion:e}"),
    ))
}

/// Runs `cfg.rounds_or_epochs` rounds of split training (A) and of plain
/// Federated Averaging over federated parameters plus the whole embedding
/// table (B) from the same seed, and reports the largest parameter
/// difference seen after any round.
pub fn split_equivalence_oracle(model_cfg: &ModelConfig, data: &TrainingData, cfg: &RunConfig) -> Result<VerificationReport> {
    split_equivalence_oracle_with(model_cfg, data, cfg, faithful_aggregate)
}

pub(crate) fn split_equivalence_oracle_with(
    model_cfg: &ModelConfig,
    data: &TrainingData,
    cfg: &RunConfig,
    aggregator: Aggregator,
) -> Result<VerificationReport> {
    if cfg.private_update != PrivateRule::Scaled {
        return Err(Error::contract(
            "the retain rule keeps the locally trained embedding, while averaging the full table \
             scales each participant's delta by z_i = c_i / sum(c); the two differ by (1 - z_i) * delta \
             by design, so equivalence is only defined for the scaled rule",
        ));
    }
    let cfg = RunConfig {
        mode: Mode::PersonalizedFl,
        ..cfg.clone()
    };
    let mut sim = FlSimulation::new(model_cfg, data, &cfg)?;
    sim.aggregator = aggregator;
    let model = sim.model.clone();
    let n = data.n_users();
    let mut full = full_table_params(&model, cfg.seed, n)?;

    let mut worst = 0.0f64;
    let mut worst_round = 0;
    for t in 0..cfg.rounds_or_epochs {
        sim.step()?;
        full = full_fedavg_round(&model, &full, data, &cfg, t)?;
        let dev = split_vs_full(&sim, &full)?;
        if dev > worst || t == 0 {
            worst = worst.max(dev);
            worst_round = t + 1;
        }
    }
    Ok(VerificationReport::new(
        "split_equivalence",
        worst,
        EQUIVALENCE_TOLERANCE,
        format!(
            "{n} users, {} per round, {} rounds; worst after round {worst_round}",
            cfg.users_per_round, cfg.rounds_or_epochs
        ),
    ))
}

/// One round of plain Federated Averaging with the table federated.
fn full_fedavg_round(model: &Model, w: &ParamSet, data: &TrainingData, cfg: &RunConfig, round: usize) -> Result<ParamSet> {
    let clients = sample_clients(data.n_users(), cfg.users_per_round, round, cfg.seed)?;
    let mut updates = Vec::new();
    for c in clients {
        let train = &data.users[c].train;
        if train.is_empty() {
            continue;
        }
        let mut local = w.clone();
        train_client_params(model, &mut local, EmbeddingSlot::Table, train, cfg, round, c)?;
        updates.push(FederatedUpdate {
            client_id: c,
            delta: local.sub(w)?,
            num_examples: train.len(),
        });
    }
    if updates.is_empty() {
        return Ok(w.clone());
    }
    aggregate_federated(w, &updates)
}

fn split_vs_full(sim: &FlSimulation<'_>, full: &ParamSet) -> Result<f64> {
    let mut fed = full.clone();
    let table = fed.remove(EMBEDDING_TABLE).expect("table present");
    let mut dev = max_dev_sets(&sim.state.w_f, &fed)?;
    for u in 0..sim.data.n_users() {
        let row = Tensor::vector(table.row(u)?.to_vec());
        dev = dev.max(max_dev_tensors(&sim.embedding(u), &row)?);
    }
    Ok(dev)
}

/// Runs one round with the retain rule and returns the largest difference
/// between the observed split-vs-full gap and `(1 - z_i) · delta_i` for
/// each participant.
pub fn retain_gap_error(model_cfg: &ModelConfig, data: &TrainingData, cfg: &RunConfig) -> Result<f64> {
    let cfg = RunConfig {
        mode: Mode::PersonalizedFl,
        private_update: PrivateRule::Retain,
        rounds_or_epochs: 1,
        ..cfg.clone()
    };
    let mut sim = FlSimulation::new(model_cfg, data, &cfg)?;
    let model = sim.model.clone();
    let full = full_table_params(&model, cfg.seed, data.n_users())?;
    let updates = sim.step()?;
    let next = full_fedavg_round(&model, &full, data, &cfg, 0)?;
    let table = next.get(EMBEDDING_TABLE).expect("table present");
    let c_total: usize = updates.iter().map(|u| u.num_examples).sum();
    let mut err = 0.0f64;
    for u in &updates {
        let z = u.num_examples as f64 / c_total as f64;
        let split = sim.embedding(u.client_id);
        let row = table.row(u.client_id)?;
        for ((s, f), d) in split.values().iter().zip(row).zip(u.delta_private.values()) {
            err = err.max(((s - f) - (1.0 - z) * d).abs());
        }
    }
    Ok(err)
}

/// A randomized small instance used by [`run_checks`].
#[derive(Clone, Debug)]
pub struct VerifyInstance {
    pub model: ModelConfig,
    pub data: TrainingData,
    pub run: RunConfig,
}

impl VerifyInstance {
    /// Between 3 and 10 users with 20 to 50 examples each.
    pub fn from_seed(seed: u64) -> Result<Self> {
        let mut rng = seed::rng("verify-instance", &[seed]);
        let n_users = rng.gen_range(3..=10);
        let synth = generate_synthetic(&SyntheticSpec {
            n_users,
            n_clusters: 4,
            examples_per_user: rng.gen_range(20..=50),
            n_topics: 8,
            seed,
            ..SyntheticSpec::default()
        })?;
        let model = ModelConfig {
            hash_dim: 64,
            hidden_dims: vec![8],
            head_hidden_dims: vec![8],
            embed_dim: 3,
            num_classes: 4,
            embed_init_scale: 0.1,
            ..ModelConfig::default()
        };
        let data = TrainingData::from_split(&split_dataset(&synth.examples)?, &model)?;
        let run = RunConfig {
            mode: Mode::PersonalizedFl,
            users_per_round: rng.gen_range(1..=n_users),
            local_epochs: rng.gen_range(1..=2),
            rounds_or_epochs: 3,
            lr: 0.1,
            batch_size: 8,
            private_update: PrivateRule::Scaled,
            seed,
            ..RunConfig::default()
        };
        Ok(Self { model, data, run })
    }
}

/// Runs all three checks on the instance for `seed`.
///
/// `inject_leak` swaps in an aggregator that mixes private deltas into the
/// federated aggregate, which the checks must catch.
pub fn run_checks(seed: u64, inject_leak: bool) -> Result<Vec<VerificationReport>> {
    let aggregator: Aggregator = if inject_leak { leaky_aggregate } else { faithful_aggregate };
    let inst = VerifyInstance::from_seed(seed)?;
    let n = inst.data.n_users();
    let i = seed::rng("verify-user", &[seed]).gen_range(0..n);
    let mut cross: Option<VerificationReport> = None;
    for j in (0..n).filter(|&j| j != i) {
        let r = check_zero_cross_gradient(&inst.model, &inst.data, i, j, seed)?;
        if cross.as_ref().map_or(true, |c| r.max_abs_deviation > c.max_abs_deviation) {
            cross = Some(r);
        }
    }
    let mut cross = cross.expect("at least two users");
    cross.details = format!("user {i} against all {} other users", n - 1);
    Ok(vec![
        cross,
        check_aggregation_independence_with(seed, aggregator)?,
        split_equivalence_oracle_with(&inst.model, &inst.data, &inst.run, aggregator)?,
    ])
}

/// Deliberately wrong aggregator: adds the sum of private deltas to the
/// first federated coordinate.
fn leaky_aggregate(w_f: &ParamSet, updates: &[ClientUpdate]) -> Result<ParamSet> {
    let mut out = faithful_aggregate(w_f, updates)?;
    let leak: f64 = updates.iter().flat_map(|u| u.delta_private.values()).sum();
    if let Some((_, t)) = out.iter_mut().next() {
        t.values_mut()[0] += leak;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_gradient_is_exactly_zero_and_own_row_is_not() {
        let inst = VerifyInstance::from_seed(4).unwrap();
        let r = check_zero_cross_gradient(&inst.model, &inst.data, 0, 1, 4).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_deviation, 0.0);
        let own = table_row_gradient(&inst.model, &inst.data, 0, 0, 4).unwrap();
        assert!(own.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn cross_gradient_finite_difference_confirms_zero() {
        let mut inst = VerifyInstance::from_seed(8).unwrap();
        inst.data.users.truncate(2);
        let fd = table_row_finite_difference(&inst.model, &inst.data, 0, 1, 8, 1e-6).unwrap();
        assert!(fd.iter().all(|v| v.abs() < 1e-10), "{fd:?}");
        let own_fd = table_row_finite_difference(&inst.model, &inst.data, 0, 0, 8, 1e-6).unwrap();
        let own = table_row_gradient(&inst.model, &inst.data, 0, 0, 8).unwrap();
        for (a, n) in own.iter().zip(&own_fd) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn cross_gradient_rejects_same_user() {
        let inst = VerifyInstance::from_seed(1).unwrap();
        assert!(matches!(
            check_zero_cross_gradient(&inst.model, &inst.data, 2, 2, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn aggregation_independence_passes() {
        for seed in 0..10 {
            let r = check_aggregation_independence(seed).unwrap();
            assert!(r.pass, "{r}: {}", r.details);
        }
    }

    #[test]
    fn leak_is_detected() {
        let r = check_aggregation_independence_with(0, leaky_aggregate).unwrap();
        assert!(!r.pass);
        let reports = run_checks(2, true).unwrap();
        assert!(!reports[1].pass && !reports[2].pass);
    }

    #[test]
    fn equivalence_three_users_two_rounds() {
        let mut inst = VerifyInstance::from_seed(6).unwrap();
        inst.data.users.truncate(3);
        inst.run.users_per_round = 2;
        inst.run.rounds_or_epochs = 2;
        let r = split_equivalence_oracle(&inst.model, &inst.data, &inst.run).unwrap();
        assert_eq!(r.max_abs_deviation, 0.0, "{}", r.details);
    }

    #[test]
    fn equivalence_single_user() {
        let mut inst = VerifyInstance::from_seed(7).unwrap();
        inst.data.users.truncate(1);
        inst.run.users_per_round = 1;
        inst.run.rounds_or_epochs = 3;
        let r = split_equivalence_oracle(&inst.model, &inst.data, &inst.run).unwrap();
        assert_eq!(r.max_abs_deviation, 0.0);
        // With a single participant z = 1, so the retain rule agrees too.
        inst.run.private_update = PrivateRule::Retain;
        assert_eq!(retain_gap_error(&inst.model, &inst.data, &inst.run).unwrap(), 0.0);
    }

    #[test]
    fn equivalence_rejects_retain() {
        let mut inst = VerifyInstance::from_seed(0).unwrap();
        inst.run.private_update = PrivateRule::Retain;
        let err = split_equivalence_oracle(&inst.model, &inst.data, &inst.run).unwrap_err();
        assert!(err.to_string().contains("z_i"));
    }

    #[test]
    fn retain_gap_is_one_minus_z_times_delta() {
        for seed in 0..3 {
            let inst = VerifyInstance::from_seed(seed).unwrap();
            let run = RunConfig {
                users_per_round: inst.data.n_users().min(3),
                ..inst.run.clone()
            };
            assert!(retain_gap_error(&inst.model, &inst.data, &run).unwrap() < 1e-12);
        }
    }

    #[test]
    fn report_line_format() {
        let r = VerificationReport::new("x", 0.0, 0.0, String::new());
        assert_eq!(r.to_string(), "CHECK x max_dev=0e0 PASS");
    }
}

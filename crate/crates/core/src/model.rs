//! Personalized text classifier with a federated/private parameter split.
//!
//! Text is featurized as L2-normalized hashed character n-gram counts and
//! passed through an encoder MLP. The encoder output is concatenated with the
//! user's embedding and fed to a head MLP that produces the logits:
//!
//! ```text
//! logits = head( relu(encoder(x)) ⊕ embedding )
//! ```
//!
//! Every encoder and head weight is federated. The embedding is the only
//! private parameter.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ParamSet, Tensor};

pub const PRIVATE_EMBEDDING: &str = "user_embedding";
pub const EMBEDDING_TABLE: &str = "user_embedding_table";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Length of the hashed feature vector.
    pub hash_dim: usize,
    /// Character n-gram length.
    pub ngram_n: usize,
    /// User embedding length.
    pub embed_dim: usize,
    /// Encoder widths, applied to the features before concatenation.
    pub hidden_dims: Vec<usize>,
    /// Head widths, applied after concatenation with the embedding.
    pub head_hidden_dims: Vec<usize>,
    /// 1 for a binary logit, C > 1 for C-way softmax.
    pub num_classes: usize,
    /// Half-width of the uniform embedding initialization.
    pub embed_init_scale: f64,
    /// Derived from the run mode; not part of the config file.
    #[serde(skip)]
    pub personalized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hash_dim: 1024,
            ngram_n: 2,
            embed_dim: 4,
            hidden_dims: vec![64],
            head_hidden_dims: vec![32],
            num_classes: 4,
            embed_init_scale: 0.05,
            personalized: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 || self.ngram_n == 0 {
            return Err(Error::contract(
                "hash_dim, embed_dim, ngram_n and num_classes must be positive",
            ));
        }
        if self.hidden_dims.iter().chain(&self.head_hidden_dims).any(|&w| w == 0) {
            return Err(Error::contract("layer widths must be positive"));
        }
        if !(self.embed_init_scale >= 0.0 && self.embed_init_scale.is_finite()) {
            return Err(Error::contract("embed_init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 1
    }

    /// Number of label values: 2 for the binary head.
    pub fn label_cardinality(&self) -> usize {
        self.num_classes.max(2)
    }
}

/// L2-normalized hashed n-gram counts.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Tensor);

impl FeatureVector {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xCBF2_9CE4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3))
}

/// Character n-grams hashed with FNV-1a into `hash_dim` buckets.
///
/// Text shorter than `n` characters counts as a single gram.
pub fn featurize(text: &str, cfg: &ModelConfig) -> FeatureVector {
    let mut counts = vec![0.0; cfg.hash_dim];
    let chars: Vec<char> = text.chars().collect();
    let mut bump = |gram: &[char]| {
        let s: String = gram.iter().collect();
        counts[(fnv1a64(s.as_bytes()) % cfg.hash_dim as u64) as usize] += 1.0;
    };
    match chars.len() {
        0 => {}
        len if len < cfg.ngram_n => bump(&chars),
        _ => chars.windows(cfg.ngram_n).for_each(bump),
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        counts.iter_mut().for_each(|c| *c /= norm);
    }
    FeatureVector(Tensor::vector(counts))
}

/// A featurized example ready for training.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: FeatureVector,
    pub label: u32,
}

/// Where the embedding fed to the head comes from.
#[derive(Clone, Copy, Debug)]
pub enum EmbeddingInput {
    /// A `[D]` node: a private leaf or a constant.
    Vector(NodeId),
    /// Row of a `[U, D]` table leaf.
    TableRow(NodeId, usize),
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut width = self.cfg.hash_dim;
        for (k, &h) in self.cfg.hidden_dims.iter().enumerate() {
            out.push((format!("encoder.{k}"), h, width));
            width = h;
        }
        width += self.cfg.embed_dim;
        for (k, &h) in self.cfg.head_hidden_dims.iter().enumerate() {
            out.push((format!("head.{k}"), h, width));
            width = h;
        }
        out.push(("head.out".to_owned(), self.cfg.num_classes, width));
        out
    }

    /// Names of the federated parameters, in layout order.
    pub fn federated_names(&self) -> Vec<String> {
        self.layer_shapes()
            .into_iter()
            .flat_map(|(l, _, _)| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }

    /// Every trainable parameter name for this configuration.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = self.federated_names();
        if self.cfg.personalized {
            names.push(PRIVATE_EMBEDDING.to_owned());
        }
        names
    }

    /// Weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init_federated(&self, seed: u64) -> ParamSet {
        let mut rng = seed::rng("init-federated", &[seed]);
        let mut set = ParamSet::new();
        for (layer, rows, cols) in self.layer_shapes() {
            let bound = 1.0 / (cols as f64).sqrt();
            let w = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
            set.insert(format!("{layer}.weight"), Tensor::matrix(rows, cols, w).expect("positive dims"))
                .expect("unique layer names");
            set.insert(format!("{layer}.bias"), Tensor::zeros(&[rows]))
                .expect("unique layer names");
        }
        set
    }

    /// Default embedding for a user that has never trained.
    pub fn init_embedding(&self, seed: u64, user: usize) -> Tensor {
        if !self.cfg.personalized {
            return Tensor::zeros(&[self.cfg.embed_dim]);
        }
        let mut rng = seed::rng("init-embedding", &[seed, user as u64]);
        let s = self.cfg.embed_init_scale;
        Tensor::vector(
            (0..self.cfg.embed_dim)
                .map(|_| if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 })
                .collect(),
        )
    }

    pub fn init_embedding_table(&self, seed: u64, n_users: usize) -> Tensor {
        let values = (0..n_users)
            .flat_map(|u| self.init_embedding(seed, u).into_values())
            .collect();
        Tensor::matrix(n_users, self.cfg.embed_dim, values).expect("positive dims")
    }

    fn check_federated(&self, w_f: &ParamSet) -> Result<()> {
        let expected = self.layer_shapes();
        let ok = w_f.len() == expected.len() * 2
            && expected.iter().zip(w_f.iter().collect::<Vec<_>>().chunks(2)).all(|((l, r, c), pair)| {
                pair[0].0 == format!("{l}.weight")
                    && pair[0].1.shape() == [*r, *c]
                    && pair[1].0 == format!("{l}.bias")
                    && pair[1].1.shape() == [*r]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::dim("model", "federated parameters do not match the model layout"))
        }
    }

    /// Adds the forward pass for one example. `fed` are the federated leaf
    /// (or constant) ids in layout order.
    pub fn logits(
        &self,
        g: &mut Graph,
        fed: &[NodeId],
        embedding: EmbeddingInput,
        x: &FeatureVector,
    ) -> Result<NodeId> {
        if x.0.len() != self.cfg.hash_dim {
            return Err(Error::dim(
                "predict",
                format!("features have length {}, expected {}", x.0.len(), self.cfg.hash_dim),
            ));
        }
        let n_enc = self.cfg.hidden_dims.len();
        let n_head = self.cfg.head_hidden_dims.len();
        if fed.len() != 2 * (n_enc + n_head + 1) {
            return Err(Error::dim("predict", "wrong number of federated parameters"));
        }
        let mut h = g.constant(x.0.clone());
        for layer in fed[..2 * n_enc].chunks(2) {
            h = g.affine(h, layer[0], layer[1])?;
            h = g.relu(h)?;
        }
        let e = match embedding {
            EmbeddingInput::Vector(id) => id,
            EmbeddingInput::TableRow(table, row) => g.embedding_lookup(table, row)?,
        };
        let mut z = g.concat(h, e)?;
        for layer in fed[2 * n_enc..2 * (n_enc + n_head)].chunks(2) {
            z = g.affine(z, layer[0], layer[1])?;
            z = g.relu(z)?;
        }
        let out = &fed[2 * (n_enc + n_head)..];
        g.affine(z, out[0], out[1])
    }

    pub fn example_loss(&self, g: &mut Graph, logits: NodeId, label: u32) -> Result<NodeId> {
        if self.cfg.is_binary() {
            g.bce_with_logits(logits, label)
        } else {
            g.cross_entropy(logits, label as usize)
        }
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, w_f: &ParamSet, w_p: &Tensor, x: &FeatureVector) -> Result<Tensor> {
        Ok(self.predict_many(w_f, w_p, std::slice::from_ref(x))?.remove(0))
    }

    pub fn predict_many(&self, w_f: &ParamSet, w_p: &Tensor, xs: &[FeatureVector]) -> Result<Vec<Tensor>> {
        self.check_federated(w_f)?;
        self.check_embedding(w_p)?;
        let mut g = Graph::new();
        let fed: Vec<NodeId> = w_f.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let e = g.constant(w_p.clone());
        xs.iter()
            .map(|x| {
                let id = self.logits(&mut g, &fed, EmbeddingInput::Vector(e), x)?;
                Ok(g.value(id).clone())
            })
            .collect()
    }

    fn check_embedding(&self, w_p: &Tensor) -> Result<()> {
        if w_p.shape() != [self.cfg.embed_dim] {
            return Err(Error::dim(
                "predict",
                format!("embedding has shape {:?}, expected [{}]", w_p.shape(), self.cfg.embed_dim),
            ));
        }
        Ok(())
    }

    /// Builds the mean loss of `batch` for one user.
    ///
    /// Leaves are the federated parameters followed, in personalized mode,
    /// by the private embedding. Without personalization the embedding is a
    /// zero constant and receives no gradient.
    pub fn local_loss_graph(&self, w_f: &ParamSet, w_p: &Tensor, batch: &[Sample]) -> Result<(Graph, NodeId)> {
        if batch.is_empty() {
            return Err(Error::contract("local loss needs a nonempty batch"));
        }
        self.check_federated(w_f)?;
        self.check_embedding(w_p)?;
        let mut g = Graph::new();
        let fed = g.params_from(w_f)?;
        let e = if self.cfg.personalized {
            g.param(PRIVATE_EMBEDDING, w_p.clone())?
        } else {
            g.constant(Tensor::zeros(&[self.cfg.embed_dim]))
        };
        let refs: Vec<&Sample> = batch.iter().collect();
        let root = self.batch_loss(&mut g, &fed, |_| EmbeddingInput::Vector(e), &refs)?;
        Ok((g, root))
    }

    /// Mean per-example loss.
    pub fn local_loss(&self, w_f: &ParamSet, w_p: &Tensor, batch: &[Sample]) -> Result<f64> {
        let (g, root) = self.local_loss_graph(w_f, w_p, batch)?;
        Ok(g.value(root).values()[0])
    }

    pub(crate) fn batch_loss<F>(&self, g: &mut Graph, fed: &[NodeId], embedding: F, batch: &[&Sample]) -> Result<NodeId>
    where
        F: Fn(usize) -> EmbeddingInput,
    {
        let losses = batch
            .iter()
            .enumerate()
            .map(|(k, s)| {
                self.check_label(s.label)?;
                let z = self.logits(g, fed, embedding(k), &s.features)?;
                self.example_loss(g, z, s.label)
            })
            .collect::<Result<Vec<_>>>()?;
        g.mean(&losses)
    }

    pub fn check_label(&self, label: u32) -> Result<()> {
        if (label as usize) < self.cfg.label_cardinality() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "label {label} out of range for {} classes",
                self.cfg.label_cardinality()
            )))
        }
    }
}

/// Federated parameters plus each user's private embedding.
#[derive(Clone, Debug)]
pub struct ParameterPartition {
    pub federated: ParamSet,
    pub private: BTreeMap<String, Tensor>,
}

impl ParameterPartition {
    pub fn new(model: &Model, federated: ParamSet, private: BTreeMap<String, Tensor>) -> Result<Self> {
        model.check_federated(&federated)?;
        for (user, t) in &private {
            if t.shape() != [model.cfg.embed_dim] {
                return Err(Error::dim(
                    "partition",
                    format!("private embedding of {user:?} has shape {:?}", t.shape()),
                ));
            }
        }
        Ok(Self { federated, private })
    }

    /// Checks that `trainable` is split into federated and private names
    /// with no gaps and no overlaps.
    pub fn check_exact(&self, trainable: &[String]) -> Result<()> {
        let federated: Vec<&str> = self.federated.names().collect();
        for name in trainable {
            let in_fed = federated.contains(&name.as_str());
            let in_priv = name == PRIVATE_EMBEDDING && !self.private.is_empty();
            match (in_fed, in_priv) {
                (true, true) => return Err(Error::contract(format!("{name} is both federated and private"))),
                (false, false) => return Err(Error::contract(format!("{name} belongs to neither partition"))),
                _ => {}
            }
        }
        if let Some(extra) = federated.iter().find(|n| !trainable.iter().any(|t| t == *n)) {
            return Err(Error::contract(format!("{extra} is not a trainable parameter")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(personalized: bool, classes: usize) -> Model {
        Model::new(ModelConfig {
            hash_dim: 16,
            embed_dim: 2,
            hidden_dims: vec![3],
            head_hidden_dims: vec![3],
            num_classes: classes,
            personalized,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn zeroed(p: &ParamSet) -> ParamSet {
        p.zeros_like()
    }

    #[test]
    fn single_bigram_is_one_hot() {
        let cfg = ModelConfig {
            hash_dim: 8,
            ngram_n: 2,
            ..ModelConfig::default()
        };
        let f = featurize("ab", &cfg);
        let nz: Vec<f64> = f.values().iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nz, vec![1.0]);
        assert_eq!(featurize("ab", &cfg), f);
        assert!(featurize("", &cfg).values().iter().all(|v| *v == 0.0));
        assert!((featurize("a", &cfg).norm() - 1.0).abs() < 1e-15);
        assert!((featurize("hello world", &cfg).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let m = tiny(true, 3);
        let w = zeroed(&m.init_federated(1));
        let x = featurize("anything", m.config());
        let z = m.predict(&w, &Tensor::vector(vec![0.3, -0.2]), &x).unwrap();
        assert_eq!(z.values(), &[0.0, 0.0, 0.0]);

        let b = tiny(true, 1);
        let w = zeroed(&b.init_federated(1));
        let z = b.predict(&w, &Tensor::zeros(&[2]), &x).unwrap();
        assert_eq!(crate::autodiff::sigmoid(z.values()[0]), 0.5);
    }

    #[test]
    fn binary_zero_params_loss_is_ln2() {
        let m = tiny(true, 1);
        let w = zeroed(&m.init_federated(1));
        let batch = vec![
            Sample { features: featurize("x", m.config()), label: 1 },
            Sample { features: featurize("yz", m.config()), label: 0 },
        ];
        let l = m.local_loss(&w, &Tensor::zeros(&[2]), &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicated_example_has_same_mean_loss() {
        let m = tiny(true, 3);
        let w = m.init_federated(4);
        let e = m.init_embedding(4, 0);
        let s = Sample { features: featurize("dup", m.config()), label: 2 };
        let one = m.local_loss(&w, &e, std::slice::from_ref(&s)).unwrap();
        let two = m.local_loss(&w, &e, &[s.clone(), s]).unwrap();
        assert_eq!(one, two);
        assert!(m.local_loss(&w, &e, &[]).is_err());
    }

    #[test]
    fn bad_shapes_rejected() {
        let m = tiny(true, 3);
        let w = m.init_federated(1);
        let x = featurize("a", m.config());
        assert!(matches!(m.predict(&w, &Tensor::zeros(&[3]), &x), Err(Error::Dimension { .. })));
        let other = tiny(true, 2).init_federated(1);
        assert!(m.predict(&other, &Tensor::zeros(&[2]), &x).is_err());
        let wide = featurize("a", &ModelConfig { hash_dim: 32, ..ModelConfig::default() });
        assert!(m.predict(&w, &Tensor::zeros(&[2]), &wide).is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let m = tiny(true, 3);
        let w = m.init_federated(1);
        let batch = [Sample { features: featurize("a", m.config()), label: 3 }];
        assert!(m.local_loss(&w, &Tensor::zeros(&[2]), &batch).is_err());
    }

    #[test]
    fn global_mode_has_no_private_leaf() {
        let m = tiny(false, 3);
        let w = m.init_federated(1);
        assert_eq!(m.init_embedding(1, 5).values(), &[0.0, 0.0]);
        let batch = [Sample { features: featurize("abc", m.config()), label: 1 }];
        let (g, root) = m.local_loss_graph(&w, &Tensor::zeros(&[2]), &batch).unwrap();
        let grads = g.backward(root).unwrap();
        assert!(grads.get(PRIVATE_EMBEDDING).is_none());
        assert_eq!(grads.names().collect::<Vec<_>>(), m.federated_names());
    }

    #[test]
    fn embedding_init_is_bounded_and_seeded() {
        let m = tiny(true, 3);
        let a = m.init_embedding(9, 3);
        assert_eq!(a, m.init_embedding(9, 3));
        assert_ne!(a, m.init_embedding(9, 4));
        assert!(a.values().iter().all(|v| v.abs() <= 0.05));
        let table = m.init_embedding_table(9, 5);
        assert_eq!(table.row(3).unwrap(), a.values());
    }

    #[test]
    fn partition_covers_trainables_exactly() {
        let m = tiny(true, 3);
        let mut private = BTreeMap::new();
        private.insert("u1".to_owned(), m.init_embedding(1, 0));
        let part = ParameterPartition::new(&m, m.init_federated(1), private).unwrap();
        part.check_exact(&m.trainable_names()).unwrap();

        let mut missing = m.trainable_names();
        missing.push("stray".into());
        assert!(part.check_exact(&missing).is_err());

        let mut overlapping = part.clone();
        overlapping
            .federated
            .insert(PRIVATE_EMBEDDING, Tensor::zeros(&[2]))
            .unwrap();
        assert!(overlapping.check_exact(&m.trainable_names()).is_err());

        let mut bad = BTreeMap::new();
        bad.insert("u1".to_owned(), Tensor::zeros(&[3]));
        assert!(ParameterPartition::new(&m, m.init_federated(1), bad).is_err());
    }
}

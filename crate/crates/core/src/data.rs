//! Labeled text examples: synthetic generation, JSON Lines I/O and the
//! per-user train/eval/test split.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Minimum examples per user for the 0.8/0.1/0.1 split to leave every
/// part nonempty.
pub const MIN_EXAMPLES_PER_USER: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: String,
    pub text: String,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    /// Latent user groups. Also the number of label classes.
    pub n_clusters: usize,
    pub examples_per_user: usize,
    pub n_topics: usize,
    pub label_noise: f64,
    /// Zipf exponent for per-user topic preferences. `None` draws topics
    /// uniformly.
    pub topic_skew: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_clusters: 4,
            examples_per_user: 60,
            n_topics: 16,
            label_noise: 0.05,
            topic_skew: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.n_clusters
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(format!("invalid synthetic spec: {m}")));
        if self.n_users == 0 {
            return fail("n_users must be positive".into());
        }
        if self.n_clusters < 2 {
            return fail(format!("n_clusters must be at least 2, got {}", self.n_clusters));
        }
        if self.n_topics < self.n_clusters {
            return fail(format!(
                "n_topics ({}) must be at least n_clusters ({})",
                self.n_topics, self.n_clusters
            ));
        }
        if self.examples_per_user < MIN_EXAMPLES_PER_USER {
            return fail(format!(
                "examples_per_user must be at least {MIN_EXAMPLES_PER_USER}, got {}",
                self.examples_per_user
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return fail(format!("label_noise must be in [0, 1), got {}", self.label_noise));
        }
        if let Some(s) = self.topic_skew {
            if !(s.is_finite() && s >= 0.0) {
                return fail(format!("topic_skew must be finite and non-negative, got {s}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub examples: Vec<Example>,
    /// Ground-truth latent group per user. Never visible to training.
    pub clusters: BTreeMap<String, usize>,
}

/// The phrase emitted for a topic.
pub fn topic_text(topic: usize) -> String {
    format!("topic{topic} w{topic}a w{topic}b")
}

/// Clean label rule: `(topic + cluster) mod C`.
pub fn clean_label(topic: usize, cluster: usize, classes: usize) -> u32 {
    ((topic + cluster) % classes) as u32
}

/// Generates a dataset where the label depends on the topic (visible in
/// the text) and on the user's latent cluster (visible only through the
/// user's identity).
///
/// Clusters are assigned by a seeded permutation of a round-robin layout,
/// so each user's cluster is uniform while group sizes differ by at most
/// one.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let c = spec.n_clusters;
    let width = (spec.n_users.saturating_sub(1)).to_string().len().max(3);
    let mut rng = seed::rng("synthetic", &[spec.seed]);

    let mut groups: Vec<usize> = (0..spec.n_users).map(|u| u % c).collect();
    groups.shuffle(&mut rng);

    let mut examples = Vec::with_capacity(spec.n_users * spec.examples_per_user);
    let mut clusters = BTreeMap::new();
    for (u, &g) in groups.iter().enumerate() {
        let user_id = format!("u{u:0width$}");
        clusters.insert(user_id.clone(), g);

        let topic_sampler = spec.topic_skew.map(|s| {
            let mut order: Vec<usize> = (0..spec.n_topics).collect();
            order.shuffle(&mut rng);
            let weights: Vec<f64> = (1..=spec.n_topics).map(|r| (r as f64).powf(-s)).collect();
            (order, WeightedIndex::new(weights).expect("positive weights"))
        });

        for _ in 0..spec.examples_per_user {
            let topic = match &topic_sampler {
                Some((order, dist)) => order[dist.sample(&mut rng)],
                None => rng.gen_range(0..spec.n_topics),
            };
            let mut label = clean_label(topic, g, c);
            if rng.gen::<f64>() < spec.label_noise {
                let shift = rng.gen_range(1..c) as u32;
                label = (label + shift) % c as u32;
            }
            examples.push(Example {
                user_id: user_id.clone(),
                text: topic_text(topic),
                label,
            });
        }
    }
    Ok(SyntheticData { examples, clusters })
}

/// One user's examples, in their original order.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub test: Vec<Example>,
}

/// Per-user train/eval/test partition. Users are sorted by id; a user's
/// position is its ordinal everywhere else in the crate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub users: Vec<UserSplit>,
}

impl DatasetSplit {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.user_id.as_str().cmp(user_id)).ok()
    }

    pub fn train_len(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }

    pub fn eval_len(&self) -> usize {
        self.users.iter().map(|u| u.eval.len()).sum()
    }

    pub fn test_len(&self) -> usize {
        self.users.iter().map(|u| u.test.len()).sum()
    }
}

/// Splits each user's examples chronologically: the last `floor(0.1 n)`
/// go to test, the `floor(0.1 n)` before them to eval, the rest to train.
pub fn split_dataset(examples: &[Example]) -> Result<DatasetSplit> {
    let mut by_user: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
    for e in examples {
        by_user.entry(&e.user_id).or_default().push(e);
    }
    let users = by_user
        .into_iter()
        .map(|(user_id, items)| {
            let n = items.len();
            if n < MIN_EXAMPLES_PER_USER {
                return Err(Error::Contract(format!(
                    "user {user_id:?} has {n} examples; at least {MIN_EXAMPLES_PER_USER} are required"
                )));
            }
            let held = n / 10;
            let train_end = n - 2 * held;
            let owned = |r: &[&Example]| r.iter().map(|e| (*e).clone()).collect::<Vec<_>>();
            Ok(UserSplit {
                user_id: user_id.to_owned(),
                train: owned(&items[..train_end]),
                eval: owned(&items[train_end..train_end + held]),
                test: owned(&items[train_end + held..]),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DatasetSplit { users })
}

/// Reads one JSON object per line. Blank lines are skipped; `num_labels`
/// bounds the label range.
pub fn load_jsonl(path: &Path, num_labels: usize) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let ex: Example = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if ex.label as usize >= num_labels {
            return Err(parse_err(format!(
                "label {} out of range for {num_labels} classes",
                ex.label
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_clusters(path: &Path, clusters: &BTreeMap<String, usize>) -> Result<()> {
    let json = serde_json::to_string_pretty(clusters)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_clusters(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub samples: usize,
    pub mean_per_user: f64,
}

pub fn dataset_stats(examples: &[Example]) -> DatasetStats {
    let users = examples
        .iter()
        .map(|e| e.user_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let samples = examples.len();
    let mean_per_user = if users == 0 { 0.0 } else { samples as f64 / users as f64 };
    DatasetStats {
        users,
        samples,
        mean_per_user,
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalPoint, Mode, RunConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "round,mode,split,metric,value";

/// A client's private state. Never written into a server checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRecord {
    pub user_id: String,
    pub embedding: Tensor,
    /// Last round (1-based) in which this client participated.
    pub last_round: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    user_id: String,
    embedding: Vec<f64>,
    last_round: usize,
}

/// Private values of every client that has participated so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientStore {
    records: BTreeMap<String, ClientRecord>,
}

fn safe_user_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl ClientStore {
    pub fn get(&self, user_id: &str) -> Option<&ClientRecord> {
        self.records.get(user_id)
    }

    pub fn put(&mut self, user_id: String, embedding: Tensor, round: usize) {
        self.records.insert(
            user_id.clone(),
            ClientRecord {
                user_id,
                embedding,
                last_round: round,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClientRecord> {
        self.records.values()
    }

    pub fn embeddings(&self) -> BTreeMap<String, Tensor> {
        self.records
            .iter()
            .map(|(k, r)| (k.clone(), r.embedding.clone()))
            .collect()
    }

    /// Writes one `<user_id>.json` per client into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for rec in self.records.values() {
            if !safe_user_id(&rec.user_id) {
                return Err(Error::contract(format!(
                    "user id {:?} cannot be used as a file name",
                    rec.user_id
                )));
            }
            let file = RecordFile {
                user_id: rec.user_id.clone(),
                embedding: rec.embedding.values().to_vec(),
                last_round: rec.last_round,
            };
            let path = dir.join(format!("{}.json", rec.user_id));
            let json = serde_json::to_string(&file)?;
            fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut store = Self::default();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: RecordFile = serde_json::from_str(&text)?;
            if file.embedding.is_empty() {
                return Err(Error::contract(format!("{}: empty embedding", path.display())));
            }
            store.put(file.user_id, Tensor::vector(file.embedding), file.last_round);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub run: RunConfig,
    pub model: ModelConfig,
}

/// Server-side state. Holds federated parameters only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerCheckpoint {
    pub format_version: u32,
    pub config: CheckpointConfig,
    pub round: usize,
    pub federated: ParamSet,
}

impl ServerCheckpoint {
    pub fn new(run: RunConfig, model: ModelConfig, round: usize, federated: ParamSet) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: CheckpointConfig { run, model },
            round,
            federated,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub mode: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(path: &Path, mode: Mode, history: &[EvalPoint]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for point in history {
        for r in &point.results {
            // `{}` on f64 prints the shortest round-tripping form.
            writeln!(out, "{},{},{},{},{}", point.round, mode, r.split, r.metric, r.value)
                .expect("writing to a String");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header {METRICS_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let round = f[0]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad round: {e}")))?;
        let value = f[4]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad value: {e}")))?;
        rows.push(MetricsRow {
            round,
            mode: f[1].to_owned(),
            split: f[2].to_owned(),
            metric: f[3].to_owned(),
            value,
        });
    }
    Ok(rows)
}

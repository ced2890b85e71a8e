use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fedsplit::data::SyntheticSpec;
use fedsplit::engine::RunConfig;
use fedsplit::model::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset in JSON Lines format.
    pub data: Option<PathBuf>,
    /// Output directory for a training run.
    pub out: Option<PathBuf>,
    /// Ground-truth user groups; defaults to `clusters.json` next to the data.
    pub clusters: Option<PathBuf>,
}

/// Everything a run needs, in one file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub synthetic: SyntheticSpec,
    pub paths: Paths,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn load_spec(path: &Path) -> anyhow::Result<SyntheticSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push((prefix.to_owned(), v.to_string())),
    }
}

/// Every config key with its default, one per line.
pub fn config_help() -> String {
    let value = serde_json::to_value(CliConfig::default()).expect("default config serializes");
    let mut keys = Vec::new();
    flatten("", &value, &mut keys);
    let mut out = String::from("Config file keys (JSON, nested by section) and defaults:\n");
    for (k, v) in keys {
        writeln!(out, "  {k} = {v}").expect("writing to a String");
    }
    out.push_str(
        "\nrun.mode is one of global_server, personalized_server, global_fl, personalized_fl.\n\
         run.private_update is scaled or retain. run.rounds_or_epochs counts rounds for FL\n\
         modes and epochs for server modes. run.private_lr = null uses run.lr.\n\
         model.num_classes = 1 selects a binary head.\n",
    );
    out
}

mod config;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use fedsplit::analysis::{cluster_agreement, export_embeddings, AnalysisReport};
use fedsplit::data::{dataset_stats, generate_synthetic, load_jsonl, read_clusters, split_dataset, write_clusters, write_jsonl, SyntheticSpec};
use fedsplit::engine::{
    evaluate, run_centralized, run_fl, write_metrics_csv, EvalPoint, ServerCheckpoint, Split, TrainingData,
};
use fedsplit::model::{Model, ModelConfig};
use fedsplit::verify::run_checks;

use crate::config::{config_help, load_spec, CliConfig};

#[derive(Parser)]
#[command(name = "fedsplit", version, about = "Federated training with private per-user embeddings")]
struct Cli {
    /// Worker threads for parallel client training (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset plus clusters.json ground truth.
    GenData {
        /// JSON file with generator settings (the `synthetic` section keys).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output JSONL path; clusters.json is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one configuration and write checkpoint, metrics and exports.
    Train {
        /// JSON config file; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the gradient, aggregation and equivalence checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check this many consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        sweep: u64,
        /// Test hook: mix private deltas into the federated aggregate.
        #[arg(long, hide = true)]
        inject_private_leak: bool,
    },
    /// Merge metrics.csv files from several run directories.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Long-format CSV; the final-metric table goes to `<stem>_final.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Exit {
    Usage(anyhow::Error),
    Failure(anyhow::Error),
    ChecksFailed,
}

fn usage(e: impl Into<anyhow::Error>) -> Exit {
    Exit::Usage(e.into())
}

fn failure(e: impl Into<anyhow::Error>) -> Exit {
    Exit::Failure(e.into())
}

/// Bad inputs are usage errors; everything else is a run failure.
fn classify(e: fedsplit::Error) -> Exit {
    use fedsplit::Error as E;
    match e {
        E::Contract(_) | E::Parse { .. } | E::Json(_) | E::Dimension { .. } | E::Bounds { .. } => usage(e),
        E::Aggregation(_) | E::UndefinedMetric(_) | E::Io { .. } => failure(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_help(config_help()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::Train { config, data, out, seed } => train(config.as_deref(), data, out, seed),
        Command::Verify {
            seed,
            sweep,
            inject_private_leak,
        } => verify(seed, sweep, inject_private_leak),
        Command::Report { runs, out } => report::run(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Exit::Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Exit::ChecksFailed) => ExitCode::from(1),
    }
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Exit> {
    let mut spec = match spec {
        Some(p) => load_spec(p).map_err(usage)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let synth = generate_synthetic(&spec).map_err(classify)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| failure(anyhow!(e).context(format!("creating {}", dir.display()))))?;
    }
    write_jsonl(out, &synth.examples).map_err(classify)?;
    write_clusters(&clusters_beside(out), &synth.clusters).map_err(classify)?;
    let stats = dataset_stats(&synth.examples);
    println!(
        "users={} samples={} mean_per_user={:.2} classes={}",
        stats.users,
        stats.samples,
        stats.mean_per_user,
        spec.num_classes()
    );
    Ok(())
}

fn clusters_beside(data: &Path) -> PathBuf {
    data.with_file_name("clusters.json")
}

fn train(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Exit> {
    let mut cfg = match config {
        Some(p) => CliConfig::load(p).map_err(usage)?,
        None => CliConfig::default(),
    };
    if data.is_some() {
        cfg.paths.data = data;
    }
    if out.is_some() {
        cfg.paths.out = out;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg.run.validate().map_err(classify)?;
    cfg.model.validate().map_err(classify)?;
    let data_path = cfg.paths.data.clone().ok_or_else(|| usage(anyhow!("no dataset given (--data)")))?;
    let out_dir = cfg.paths.out.clone().ok_or_else(|| usage(anyhow!("no output directory given (--out)")))?;

    let examples = load_jsonl(&data_path, cfg.model.label_cardinality()).map_err(classify)?;
    let split = split_dataset(&examples).map_err(classify)?;
    let data = TrainingData::from_split(&split, &cfg.model).map_err(classify)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display())).map_err(failure)?;

    let mode = cfg.run.mode;
    let (checkpoint, history, embeddings) = if mode.federated() {
        let out = run_fl(&cfg.model, &data, &cfg.run).map_err(classify)?;
        for w in &out.warnings {
            eprintln!("warning: {w}");
        }
        if mode.personalized() {
            out.store.save(&out_dir.join("clients")).map_err(classify)?;
        }
        let ckpt = ServerCheckpoint::new(cfg.run.clone(), cfg.model.clone(), out.state.round, out.state.w_f);
        (ckpt, out.history, out.store.embeddings())
    } else {
        let out = run_centralized(&cfg.model, &data, &cfg.run).map_err(classify)?;
        let embeddings = out.embedding_map(&data);
        let ckpt = ServerCheckpoint::new(cfg.run.clone(), cfg.model.clone(), cfg.run.rounds_or_epochs, out.w_f);
        (ckpt, out.history, embeddings)
    };
    let history = if history.is_empty() {
        vec![initial_evaluation(&cfg, &data, &checkpoint).map_err(classify)?]
    } else {
        history
    };
    checkpoint.save(&out_dir.join("checkpoint.json")).map_err(classify)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), mode, &history).map_err(classify)?;

    if mode.personalized() && !embeddings.is_empty() {
        export_embeddings(&embeddings, &out_dir.join("embeddings.csv")).map_err(classify)?;
        let clusters = cfg.paths.clusters.clone().unwrap_or_else(|| clusters_beside(&data_path));
        if clusters.exists() {
            let truth = read_clusters(&clusters).map_err(classify)?;
            let k = truth.values().collect::<BTreeSet<_>>().len();
            let ari = cluster_agreement(&embeddings, &truth, k, cfg.run.seed).map_err(classify)?;
            let report = AnalysisReport {
                mode: mode.to_string(),
                ari,
                n_users: embeddings.len(),
            };
            let json = serde_json::to_string_pretty(&report).map_err(failure)?;
            let path = out_dir.join("analysis.json");
            fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display())).map_err(failure)?;
            println!("cluster agreement ari={ari:.4} users={}", embeddings.len());
        }
    }
    print_final(mode, history.last());
    Ok(())
}

/// Evaluation of the untrained model, for runs with zero rounds.
fn initial_evaluation(cfg: &CliConfig, data: &TrainingData, checkpoint: &ServerCheckpoint) -> fedsplit::Result<EvalPoint> {
    let model = Model::new(ModelConfig {
        personalized: cfg.run.mode.personalized(),
        ..cfg.model.clone()
    })?;
    let results = evaluate(
        &model,
        &checkpoint.federated,
        |u| model.init_embedding(cfg.run.seed, u),
        data,
        Split::Eval,
    )?;
    Ok(EvalPoint {
        round: 0,
        epoch: 0.0,
        results,
    })
}

fn print_final(mode: fedsplit::engine::Mode, last: Option<&EvalPoint>) {
    let Some(point) = last else {
        println!("{mode}: no evaluation points");
        return;
    };
    let metrics: Vec<String> = point
        .results
        .iter()
        .map(|r| format!("{}={:.4}", r.metric, r.value))
        .collect();
    println!("{mode} round {} eval {}", point.round, metrics.join(" "));
}

fn verify(seed: u64, sweep: u64, inject_leak: bool) -> Result<(), Exit> {
    if sweep == 0 {
        return Err(usage(anyhow!("--sweep must be at least 1")));
    }
    let mut all_pass = true;
    for s in seed..seed + sweep {
        let reports = run_checks(s, inject_leak).map_err(classify)?;
        for r in reports {
            log::info!("seed {s} {}: {}", r.name, r.details);
            println!("{r}");
            all_pass &= r.pass;
        }
    }
    if all_pass {
        Ok(())
    } else {
        Err(Exit::ChecksFailed)
    }
}

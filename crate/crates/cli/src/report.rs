use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use fedsplit::engine::{read_metrics_csv, MetricsRow};

use crate::{failure, usage, Exit};

const METRICS: [&str; 3] = ["auc", "accuracy", "loss"];

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn final_table_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_final.csv"))
}

/// Writes the merged long-format CSV and a one-row-per-run table of the
/// last evaluation point, which is also printed.
pub(crate) fn run(runs: &[PathBuf], out: &Path) -> Result<(), Exit> {
    if runs.is_empty() {
        return Err(usage(anyhow!("no run directories given")));
    }
    let mut loaded: Vec<(String, Vec<MetricsRow>)> = Vec::new();
    for dir in runs {
        let path = dir.join("metrics.csv");
        if !path.is_file() {
            return Err(usage(anyhow!("{} has no metrics.csv", dir.display())));
        }
        let rows = read_metrics_csv(&path).map_err(usage)?;
        loaded.push((run_name(dir), rows));
    }

    let mut long = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display())).map_err(failure)?;
    long.write_record(["run", "round", "mode", "split", "metric", "value"]).map_err(failure)?;
    for (name, rows) in &loaded {
        for r in rows {
            long.write_record([name, &r.round.to_string(), &r.mode, &r.split, &r.metric, &r.value.to_string()])
                .map_err(failure)?;
        }
    }
    long.flush().map_err(failure)?;

    let table_path = final_table_path(out);
    let mut table = csv::Writer::from_path(&table_path)
        .with_context(|| format!("writing {}", table_path.display()))
        .map_err(failure)?;
    let mut header = vec!["run", "mode", "round"];
    header.extend(METRICS);
    table.write_record(&header).map_err(failure)?;
    println!("{}", header.join("\t"));
    for (name, rows) in &loaded {
        let last_round = rows.iter().map(|r| r.round).max();
        let mode = rows.first().map(|r| r.mode.clone()).unwrap_or_default();
        let mut record = vec![name.clone(), mode, last_round.map(|r| r.to_string()).unwrap_or_default()];
        for m in METRICS {
            let v = rows
                .iter()
                .filter(|r| Some(r.round) == last_round && r.metric == m && r.split == "eval")
                .map(|r| r.value.to_string())
                .next_back()
                .unwrap_or_default();
            record.push(v);
        }
        table.write_record(&record).map_err(failure)?;
        println!("{}", record.join("\t"));
    }
    table.flush().map_err(failure)?;
    Ok(())
}

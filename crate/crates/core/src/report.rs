//! Result persistence: per-trial CSV rows, a JSON dump of the full run,
//! and an aligned plain-text comparison table.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{avg_accuracy, avg_forgetting, mean_std, RunReport};

/// One CSV row per (seed, strategy, task): the all-seen accuracy after
/// that task plus the per-task accuracy columns filled so far.
pub fn write_csv(report: &RunReport, path: &Path) -> Result<()> {
    let n_tasks = report.config.benchmark.num_tasks;
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec![
        "seed".to_string(),
        "strategy".to_string(),
        "task".to_string(),
        "acc_seen".to_string(),
    ];
    for j in 0..n_tasks {
        header.push(format!("acc_task_{j}"));
    }
    header.extend(
        ["avg_accuracy", "avg_forgetting", "trainable_params", "total_params"]
            .map(String::from),
    );
    wtr.write_record(&header)?;
    for trial in &report.trials {
        for (t, row) in trial.matrix.per_task.iter().enumerate() {
            let mut rec = vec![
                trial.seed.to_string(),
                trial.strategy.clone(),
                t.to_string(),
                format!("{:.6}", trial.matrix.seen[t]),
            ];
            for j in 0..n_tasks {
                rec.push(row.get(j).map(|a| format!("{a:.6}")).unwrap_or_default());
            }
            rec.push(format!("{:.6}", trial.avg_accuracy));
            rec.push(trial.avg_forgetting.map(|f| format!("{f:.6}")).unwrap_or_default());
            rec.push(trial.trainable_params.to_string());
            rec.push(trial.total_params.to_string());
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Aligned comparison table over strategies: average accuracy, average
/// forgetting, and trained/total parameters as a share of the encoder.
pub fn comparison_table(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>16} {:>16} {:>10} {:>10}\n",
        "strategy", "avg_acc", "avg_forget", "train%", "final%"
    ));
    for s in &report.summary {
        let enc = s.encoder_params.max(1) as f64;
        out.push_str(&format!(
            "{:<12} {:>8.4} ± {:<5.4} {:>8.4} ± {:<5.4} {:>9.1}% {:>9.1}%\n",
            s.strategy,
            s.a_n_mean,
            s.a_n_std,
            s.f_n_mean,
            s.f_n_std,
            100.0 * s.trainable_params as f64 / enc,
            100.0 * s.total_params as f64 / enc,
        ));
    }
    out
}

/// Write the JSON report, the CSV table, and the text summary into `dir`.
pub fn save_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    std::fs::write(dir.join("report.json"), json)?;
    write_csv(report, &dir.join("results.csv"))?;
    std::fs::write(dir.join("summary.txt"), comparison_table(report))?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let raw = std::fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&raw).map_err(|e| Error::Format(format!("report parse: {e}")))
}

/// Reload a run directory, recompute both metrics from the raw accuracy
/// matrices, check them against the stored values, and return the table.
pub fn regenerate(dir: &Path) -> Result<String> {
    let report = load_report(dir)?;
    for trial in &report.trials {
        let a = avg_accuracy(&trial.matrix)?;
        if (a - trial.avg_accuracy).abs() > 1e-12 {
            return Err(Error::State(format!(
                "stored avg accuracy {} disagrees with recomputed {} (seed {}, {})",
                trial.avg_accuracy, a, trial.seed, trial.strategy
            )));
        }
        let f = avg_forgetting(&trial.matrix);
        if f.zip(trial.avg_forgetting).map(|(x, y)| (x - y).abs() > 1e-12).unwrap_or(
            f.is_some() != trial.avg_forgetting.is_some(),
        ) {
            return Err(Error::State(format!(
                "stored avg forgetting disagrees with recomputed value (seed {}, {})",
                trial.seed, trial.strategy
            )));
        }
        // summary must also agree with the trials
        let of_kind: Vec<f64> = report
            .trials
            .iter()
            .filter(|t| t.strategy == trial.strategy)
            .map(|t| t.avg_accuracy)
            .collect();
        let (mean, _) = mean_std(&of_kind);
        let s = report
            .summary
            .iter()
            .find(|s| s.strategy == trial.strategy)
            .ok_or_else(|| Error::State(format!("strategy {} missing from summary", trial.strategy)))?;
        if (mean - s.a_n_mean).abs() > 1e-12 {
            return Err(Error::State(format!("summary mean for {} is stale", trial.strategy)));
        }
    }
    Ok(comparison_table(&report))
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::train::{RunSummary, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::model::EstimatorMode;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub mode: EstimatorMode,
    pub seed: u64,
    /// Final eps in direct mode, tau in gumbel-softmax mode.
    pub eps_or_tau: Option<f64>,
    pub acc: f64,
    pub acc_star: f64,
    pub gaze_hit_rate_pred: f64,
    pub gaze_hit_rate_annotation: f64,
    pub wall_time_secs: f64,
}

fn read_run(dir: &Path) -> Result<ReportRow> {
    for f in [SUMMARY_FILE, CONFIG_FILE, METRICS_FILE] {
        if !dir.join(f).is_file() {
            return Err(Error::Data(format!("{}: missing {f}", dir.display())));
        }
    }
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let eps_or_tau = match summary.mode {
        EstimatorMode::Direct => Some(summary.final_eps),
        EstimatorMode::GumbelSoftmax => Some(cfg.tau),
        _ => None,
    };
    Ok(ReportRow {
        run: dir.display().to_string(),
        mode: summary.mode,
        seed: summary.seed,
        eps_or_tau,
        acc: summary.test.accuracy.acc,
        acc_star: summary.test.accuracy.acc_star,
        gaze_hit_rate_pred: summary.test.gaze_hit_rate_pred,
        gaze_hit_rate_annotation: summary.test.gaze_hit_rate_annotation,
        wall_time_secs: summary.wall_time_secs,
    })
}

/// One row per completed run, sorted by mode, then seed, then run path.
pub fn collect_report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let mut rows = run_dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (a.mode, a.seed, &a.run).cmp(&(b.mode, b.seed, &b.run)));
    Ok(rows)
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table with accuracies and hit rates in percent.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>6} {:>10} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "mode", "seed", "eps/tau", "Acc", "Acc*", "hit(pred)", "hit(gt)", "wall(s)"
    );
    for r in rows {
        let setting = r.eps_or_tau.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>10} {:>8.2} {:>8.2} {:>10.2} {:>10.2} {:>10.1}",
            r.mode.name(),
            r.seed,
            setting,
            100.0 * r.acc,
            100.0 * r.acc_star,
            100.0 * r.gaze_hit_rate_pred,
            100.0 * r.gaze_hit_rate_annotation,
            r.wall_time_secs
        );
    }
    s
}

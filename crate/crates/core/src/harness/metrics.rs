use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of `metrics.csv`. Test columns are filled on evaluation steps only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub eps: f64,
    pub lr: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub test_acc_star: Option<f64>,
}

pub const METRICS_CSV_HEADER: [&str; 9] = [
    "iter",
    "loss",
    "nll",
    "kl",
    "eps",
    "lr",
    "train_acc",
    "test_acc",
    "test_acc_star",
];

/// Appends rows to a CSV with a header, flushing after every row.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        // The header goes out up front so a run with no steps still leaves a readable file.
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        inner.write_record(METRICS_CSV_HEADER)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_CSV_HEADER {
        return Err(Error::Data(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Class-balanced and overall accuracy from labels and predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Mean over classes of per-class recall, in [0, 1]. Classes absent from
    /// the labels are skipped.
    pub acc: f64,
    /// Fraction correct overall.
    pub acc_star: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn accuracy(labels: &[usize], preds: &[usize], classes: usize) -> Result<Accuracy> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "accuracy over {} labels and {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= classes || p >= classes {
            return Err(Error::Data(format!("class index out of range for {classes} classes")));
        }
        confusion[y][p] += 1;
    }
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Accuracy {
        acc: recalls.iter().sum::<f64>() / recalls.len() as f64,
        acc_star: correct as f64 / labels.len() as f64,
        confusion,
    })
}

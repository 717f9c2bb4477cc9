use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, Accuracy};
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::model::{check_params, predict, EstimatorMode, GazeDecode, ModelConfig, Prediction};
use crate::scalar::Scalar;
use crate::synthtask::{gaze_hit_rate, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EstimatorMode,
    pub examples: usize,
    #[serde(flatten)]
    pub accuracy: Accuracy,
    /// Exact-cell agreement of the decoded gaze with the true gaze.
    pub gaze_hit_rate_pred: f64,
    /// Exact-cell agreement of the annotation with the true gaze.
    pub gaze_hit_rate_annotation: f64,
}

/// Predictions for every example of `data`, in order. With
/// [`GazeDecode::Sampled`], example `i` draws from `streams.child(i)`.
pub fn predict_all<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    data: &Dataset<S>,
    mode: EstimatorMode,
    decode: GazeDecode,
) -> Result<Vec<Prediction<S>>> {
    let dims = cfg.dims()?;
    if data.dims != dims || data.feat != cfg.feat || data.classes != cfg.classes {
        return Err(Error::Config(format!(
            "dataset dims {:?} feat {} classes {} do not match model dims {:?} feat {} classes {}",
            data.dims, data.feat, data.classes, dims, cfg.feat, cfg.classes
        )));
    }
    check_params(cfg, params)?;
    data.examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let d = match decode {
                GazeDecode::Sampled(streams) => GazeDecode::Sampled(streams.child(i as u64)),
                GazeDecode::Map => GazeDecode::Map,
            };
            predict(cfg, params, ex, mode, d)
        })
        .collect()
}

/// Test metrics with MAP gaze.
pub fn evaluate<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    data: &Dataset<S>,
    mode: EstimatorMode,
) -> Result<EvalReport> {
    let preds = predict_all(cfg, params, data, mode, GazeDecode::Map)?;
    report_from_predictions(cfg, data, mode, &preds)
}

pub fn report_from_predictions<S: Scalar>(
    cfg: &ModelConfig,
    data: &Dataset<S>,
    mode: EstimatorMode,
    preds: &[Prediction<S>],
) -> Result<EvalReport> {
    let labels: Vec<usize> = data.examples.iter().map(|e| e.y).collect();
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let truth: Vec<_> = data.examples.iter().map(|e| e.gaze_true.clone()).collect();
    let annot: Vec<_> = data.examples.iter().map(|e| e.gaze_gt.clone()).collect();
    let gaze: Vec<_> = preds.iter().map(|p| p.gaze.clone()).collect();
    Ok(EvalReport {
        mode,
        examples: labels.len(),
        accuracy: accuracy(&labels, &classes, cfg.classes)?,
        gaze_hit_rate_pred: gaze_hit_rate(&gaze, &truth, data.dims, 0)?,
        gaze_hit_rate_annotation: gaze_hit_rate(&annot, &truth, data.dims, 0)?,
    })
}

#[derive(Serialize)]
struct AttnStats {
    min: f64,
    max: f64,
    mean: f64,
}

#[derive(Serialize)]
struct PredictionRecord {
    id: usize,
    true_class: usize,
    pred_class: usize,
    class_logprobs: Vec<f64>,
    gaze_pred: Vec<[usize; 3]>,
    gaze_gt: Vec<[usize; 3]>,
    gaze_true: Vec<[usize; 3]>,
    /// Absent in none mode.
    attn_stats: Option<AttnStats>,
}

/// One JSON object per example with labels, gaze traces as `[t, h, w]`
/// triples and attention statistics.
pub fn write_predictions<S: Scalar>(data: &Dataset<S>, preds: &[Prediction<S>], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let d = data.dims;
    for (ex, p) in data.examples.iter().zip(preds) {
        let rec = PredictionRecord {
            id: ex.id,
            true_class: ex.y,
            pred_class: p.class,
            class_logprobs: p.class_logprobs.iter().map(|v| v.as_f64()).collect(),
            gaze_pred: p.gaze.to_trace(d),
            gaze_gt: ex.gaze_gt.to_trace(d),
            gaze_true: ex.gaze_true.to_trace(d),
            attn_stats: p.attention.as_ref().map(|a| {
                let (min, max, mean) = a.stats();
                AttnStats { min, max, mean }
            }),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

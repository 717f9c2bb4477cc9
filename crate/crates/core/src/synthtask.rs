//! Synthetic feature grids whose class evidence sits at one "true gaze" cell
//! per timestep, paired with gaze annotations corrupted at rate `eta`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::latent::{LatentDims, LatentIndex};
use crate::rng::stream_rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Feature channels per cell.
    pub feat: usize,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Scale of the class token added at the true gaze cells.
    pub strength: f64,
    /// Per-timestep probability that the annotation points elsewhere.
    pub gaze_noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            t: 3,
            h: 7,
            w: 7,
            feat: 16,
            classes: 10,
            train_size: 4000,
            test_size: 1000,
            strength: 2.0,
            gaze_noise: 0.3,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn dims(&self) -> Result<LatentDims> {
        LatentDims::new(self.t, self.h, self.w)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if !(0.0..=1.0).contains(&self.gaze_noise) {
            return Err(Error::Config(format!("gaze_noise must lie in [0, 1], got {}", self.gaze_noise)));
        }
        if !(self.strength > 0.0) {
            return Err(Error::Config("strength must be positive".into()));
        }
        if self.classes < 2 || self.classes > self.feat {
            return Err(Error::Config(format!(
                "need 2 <= classes <= feat, got classes={} feat={}",
                self.classes, self.feat
            )));
        }
        if self.gaze_noise > 0.0 && self.h * self.w < 2 {
            return Err(Error::Config("gaze corruption needs at least two cells".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example<S = f64> {
    pub id: usize,
    /// Features, `[T*H*W, feat]` with row `t*H*W + h*W + w`.
    pub x: Tensor<S>,
    pub y: usize,
    /// Cells that actually carry the class token.
    pub gaze_true: LatentIndex,
    /// Annotation, possibly corrupted.
    pub gaze_gt: LatentIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S = f64> {
    pub dims: LatentDims,
    pub feat: usize,
    pub classes: usize,
    pub examples: Vec<Example<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDatasets<S = f64> {
    pub train: Dataset<S>,
    pub test: Dataset<S>,
    /// Class tokens, `[classes, feat]`.
    pub tokens: Tensor<S>,
}

const TOKEN_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Seeded Gaussian class embeddings, one row per class.
pub fn class_tokens<S: Scalar>(cfg: &TaskConfig) -> Tensor<S> {
    let mut rng = stream_rng(cfg.seed, TOKEN_STREAM);
    let data = (0..cfg.classes * cfg.feat)
        .map(|_| S::lit(StandardNormal.sample(&mut rng)))
        .collect();
    Tensor::from_parts(vec![cfg.classes, cfg.feat], data)
}

fn generate_split<S: Scalar>(cfg: &TaskConfig, tokens: &Tensor<S>, n: usize, stream: u64) -> Result<Dataset<S>> {
    let dims = cfg.dims()?;
    let mut rng = stream_rng(cfg.seed, stream);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let cells = dims.cells();
    let strength = S::lit(cfg.strength);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(id, y)| {
            let truth: Vec<usize> = (0..dims.t).map(|_| rng.random_range(0..cells)).collect();
            let annotated: Vec<usize> = truth
                .iter()
                .map(|&c| {
                    if rng.random::<f64>() < cfg.gaze_noise {
                        // uniform over the other cells
                        let o = rng.random_range(0..cells - 1);
                        if o >= c { o + 1 } else { o }
                    } else {
                        c
                    }
                })
                .collect();
            let mut x: Vec<S> = (0..dims.total() * cfg.feat)
                .map(|_| S::lit(StandardNormal.sample(&mut rng)))
                .collect();
            let token = &tokens.data()[y * cfg.feat..(y + 1) * cfg.feat];
            for (t, &c) in truth.iter().enumerate() {
                let row = t * cells + c;
                for (v, &e) in x[row * cfg.feat..(row + 1) * cfg.feat].iter_mut().zip(token) {
                    *v = *v + strength * e;
                }
            }
            Example {
                id,
                x: Tensor::from_parts(vec![dims.total(), cfg.feat], x),
                y,
                gaze_true: LatentIndex::from_cells_unchecked(truth),
                gaze_gt: LatentIndex::from_cells_unchecked(annotated),
            }
        })
        .collect();
    Ok(Dataset {
        dims,
        feat: cfg.feat,
        classes: cfg.classes,
        examples,
    })
}

pub fn generate_dataset<S: Scalar>(cfg: &TaskConfig) -> Result<SplitDatasets<S>> {
    cfg.validate()?;
    let tokens = class_tokens(cfg);
    Ok(SplitDatasets {
        train: generate_split(cfg, &tokens, cfg.train_size, TRAIN_STREAM)?,
        test: generate_split(cfg, &tokens, cfg.test_size, TEST_STREAM)?,
        tokens,
    })
}

/// Fraction of timesteps whose predicted cell lies within Chebyshev
/// distance `radius` of the true cell.
pub fn gaze_hit_rate(pred: &[LatentIndex], truth: &[LatentIndex], dims: LatentDims, radius: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "hit-rate: {} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, q) in pred.iter().zip(truth) {
        if p.len() != q.len() {
            return Err(Error::Data("hit-rate: timestep count mismatch".into()));
        }
        for (&a, &b) in p.cells().iter().zip(q.cells()) {
            let (ah, aw) = dims.coord_of(a);
            let (bh, bw) = dims.coord_of(b);
            if ah.abs_diff(bh).max(aw.abs_diff(bw)) <= radius {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("hit-rate over an empty set".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: usize,
    shape: [usize; 4],
    x: Vec<f64>,
    y: usize,
    gaze_true: Vec<[usize; 3]>,
    gaze_gt: Vec<[usize; 3]>,
}

/// Writes one JSON object per example.
pub fn write_jsonl<S: Scalar>(data: &Dataset<S>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let d = data.dims;
    for ex in &data.examples {
        let rec = ExampleRecord {
            id: ex.id,
            shape: [d.t, d.h, d.w, data.feat],
            x: ex.x.data().iter().map(|v| v.as_f64()).collect(),
            y: ex.y,
            gaze_true: ex.gaze_true.to_trace(d),
            gaze_gt: ex.gaze_gt.to_trace(d),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_jsonl`], validating every record
/// against the first record's shape and the class count.
pub fn read_jsonl<S: Scalar>(path: &Path, classes: usize) -> Result<Dataset<S>> {
    let reader = BufReader::new(File::open(path)?);
    let mut shape: Option<[usize; 4]> = None;
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let s = *shape.get_or_insert(rec.shape);
        let bad = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), lineno + 1));
        if rec.shape != s {
            return Err(bad(format!("shape {:?} differs from {:?}", rec.shape, s)));
        }
        let dims = LatentDims::new(s[0], s[1], s[2]).map_err(|e| bad(e.to_string()))?;
        if rec.x.len() != s.iter().product::<usize>() {
            return Err(bad(format!("x has {} values for shape {:?}", rec.x.len(), s)));
        }
        if rec.x.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature".into()));
        }
        if rec.y >= classes {
            return Err(bad(format!("label {} out of range for {classes} classes", rec.y)));
        }
        let gaze_true = LatentIndex::from_trace(&rec.gaze_true, dims).map_err(|e| bad(e.to_string()))?;
        let gaze_gt = LatentIndex::from_trace(&rec.gaze_gt, dims).map_err(|e| bad(e.to_string()))?;
        examples.push(Example {
            id: rec.id,
            x: Tensor::from_f64(vec![dims.total(), s[3]], &rec.x)?,
            y: rec.y,
            gaze_true,
            gaze_gt,
        });
    }
    let s = shape.ok_or_else(|| Error::Data(format!("{} holds no examples", path.display())))?;
    Ok(Dataset {
        dims: LatentDims::new(s[0], s[1], s[2])?,
        feat: s[3],
        classes,
        examples,
    })
}

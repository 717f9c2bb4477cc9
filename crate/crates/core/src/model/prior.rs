use serde::{Deserialize, Serialize};

use super::config::{GazeSupervision, ModelConfig};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::latent::{LatentDims, LatentIndex};
use crate::scalar::Scalar;

/// Per-timestep normalised log-probabilities over cells, `[T, H*W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeDistribution<S = f64> {
    logprobs: Tensor<S>,
}

impl<S: Scalar> GazeDistribution<S> {
    pub fn new(logprobs: Tensor<S>) -> Result<Self> {
        if logprobs.shape().len() != 2 || !logprobs.all_finite() {
            return Err(Error::shape("gaze-distribution", format!("{:?}", logprobs.shape())));
        }
        let cols = logprobs.shape()[1];
        for row in logprobs.data().chunks(cols) {
            let total: f64 = row.iter().map(|v| v.as_f64().exp()).sum();
            if (total - 1.0).abs() > 1e-8 {
                return Err(Error::Data(format!("gaze row sums to {total}")));
            }
        }
        Ok(GazeDistribution { logprobs })
    }

    pub fn logprobs(&self) -> &Tensor<S> {
        &self.logprobs
    }

    pub fn probs(&self) -> Tensor<S> {
        self.logprobs.map(|v| v.exp())
    }

    /// Per-timestep MAP cell, smallest index on ties.
    pub fn map_index(&self) -> LatentIndex {
        let cols = self.logprobs.shape()[1];
        let cells = self
            .logprobs
            .data()
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        LatentIndex::from_cells_unchecked(cells)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    GroundTruthSmoothed,
    Uniform,
}

/// Annotation-derived target distribution over cells, `[T, H*W]`, floored.
#[derive(Clone, Debug, PartialEq)]
pub struct GazePrior<S = f64> {
    probs: Tensor<S>,
    pub source: PriorSource,
}

impl<S: Scalar> GazePrior<S> {
    /// Box-blurs the one-hot annotation with a `kernel x kernel` window
    /// (clipped and renormalised at borders), then mixes in the floor:
    /// `p = (1 - H*W*floor) * blur + floor`.
    pub fn from_annotation(gt: &LatentIndex, dims: LatentDims, kernel: usize, floor: f64) -> Result<Self> {
        Self::check_floor(dims, floor)?;
        if gt.len() != dims.t {
            return Err(Error::shape("gaze-prior", format!("{} timesteps for T={}", gt.len(), dims.t)));
        }
        let r = kernel / 2;
        let cells = dims.cells();
        let keep = 1.0 - cells as f64 * floor;
        let mut data = vec![S::zero(); dims.total()];
        for (t, &c) in gt.cells().iter().enumerate() {
            if c >= cells {
                return Err(Error::Data(format!("annotation cell {c} out of range")));
            }
            let (ch, cw) = dims.coord_of(c);
            let hs = ch.saturating_sub(r)..=(ch + r).min(dims.h - 1);
            let ws = cw.saturating_sub(r)..=(cw + r).min(dims.w - 1);
            let count = (hs.end() - hs.start() + 1) * (ws.end() - ws.start() + 1);
            let row = &mut data[t * cells..(t + 1) * cells];
            row.iter_mut().for_each(|v| *v = S::lit(floor));
            for h in hs {
                for w in ws.clone() {
                    row[dims.cell_of(h, w)] = S::lit(keep / count as f64 + floor);
                }
            }
        }
        Ok(GazePrior {
            probs: Tensor::from_parts(vec![dims.t, cells], data),
            source: PriorSource::GroundTruthSmoothed,
        })
    }

    pub fn uniform(dims: LatentDims) -> Self {
        let p = S::one() / S::from_usize(dims.cells()).unwrap();
        GazePrior {
            probs: Tensor::full(&[dims.t, dims.cells()], p),
            source: PriorSource::Uniform,
        }
    }

    /// Arbitrary floored distribution; rows must sum to one.
    pub fn from_probs(probs: Tensor<S>) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(Error::shape("gaze-prior", format!("{:?}", probs.shape())));
        }
        let cols = probs.shape()[1];
        for row in probs.data().chunks(cols) {
            if row.iter().any(|v| !(v.as_f64() > 0.0)) {
                return Err(Error::Data("prior entries must be strictly positive".into()));
            }
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::Data(format!("prior row sums to {total}")));
            }
        }
        Ok(GazePrior {
            probs,
            source: PriorSource::GroundTruthSmoothed,
        })
    }

    pub fn for_config(cfg: &ModelConfig, gt: Option<&LatentIndex>) -> Result<Self> {
        let dims = cfg.dims()?;
        match gt {
            Some(gt) => Self::from_annotation(gt, dims, cfg.prior_kernel, cfg.prior_floor),
            None => Ok(Self::uniform(dims)),
        }
    }

    fn check_floor(dims: LatentDims, floor: f64) -> Result<()> {
        if !(floor > 0.0) || floor * dims.cells() as f64 >= 1.0 {
            return Err(Error::Config(format!("prior floor {floor} outside (0, 1/(H*W))")));
        }
        Ok(())
    }

    pub fn probs(&self) -> &Tensor<S> {
        &self.probs
    }
}

fn check_pair<S: Scalar>(q: &Tensor<S>, prior: &GazePrior<S>) -> Result<()> {
    if q.shape() != prior.probs.shape() {
        return Err(Error::shape(
            "gaze-kl",
            format!("q {:?} vs prior {:?}", q.shape(), prior.probs.shape()),
        ));
    }
    Ok(())
}

/// Divergence between the gaze distribution and the prior, summed over timesteps.
pub fn gaze_kl<S: Scalar>(q: &GazeDistribution<S>, prior: &GazePrior<S>, mode: GazeSupervision) -> Result<S> {
    check_pair(&q.logprobs, prior)?;
    let lq = q.logprobs.data();
    let p = prior.probs.data();
    let total = lq
        .iter()
        .zip(p)
        .map(|(&lq, &p)| match mode {
            GazeSupervision::ReverseKl => lq.exp() * (lq - p.ln()),
            GazeSupervision::ForwardCe => p * (p.ln() - lq),
        })
        .sum();
    Ok(total)
}

/// Tape version of [`gaze_kl`]; `logq` is a `[T, H*W]` node.
pub fn gaze_kl_tape<S: Scalar>(
    tape: &mut Tape<S>,
    logq: Var,
    prior: &GazePrior<S>,
    mode: GazeSupervision,
) -> Result<Var> {
    check_pair(tape.value(logq), prior)?;
    let logp = tape.constant(prior.probs.map(|p| p.ln()));
    match mode {
        GazeSupervision::ReverseKl => {
            let q = tape.exp(logq);
            let diff = tape.sub(logq, logp)?;
            let terms = tape.mul(q, diff)?;
            tape.reduce_sum(terms, None)
        }
        GazeSupervision::ForwardCe => {
            let p = tape.constant(prior.probs.clone());
            let diff = tape.sub(logp, logq)?;
            let terms = tape.mul(p, diff)?;
            tape.reduce_sum(terms, None)
        }
    }
}

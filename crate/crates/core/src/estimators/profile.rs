//! Bias and variance of an estimator against the enumeration oracle.

use std::path::Path;

use serde::Serialize;

use super::{exact_grad_phi, for_each_replicate, EstimatorKind, Instance};
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::latent::DEFAULT_ENUMERATION_CAP;
use crate::model::{init_params, ModelConfig, GAZE_HEAD_W2, REC_HEAD_W2};
use crate::rng::NoiseStreams;
use crate::scalar::Scalar;
use crate::synthtask::{generate_dataset, Example, TaskConfig};

pub const PROFILE_CSV_HEADER: [&str; 7] = [
    "estimator",
    "eps_or_tau",
    "replicates",
    "bias_l2",
    "variance_trace",
    "exact_norm",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorProfile {
    pub estimator: String,
    pub eps_or_tau: Option<f64>,
    /// Total replicates, `trials * replicates_per_trial`.
    pub replicates: usize,
    /// `|| mean replicate gradient - exact gradient ||_2`.
    pub bias_l2: f64,
    /// Sum over entries of the mean squared deviation around the mean.
    pub variance_trace: f64,
    pub exact_norm: f64,
    pub seed: u64,
}

impl EstimatorProfile {
    pub fn relative_bias(&self) -> f64 {
        if self.exact_norm > 0.0 {
            self.bias_l2 / self.exact_norm
        } else {
            self.bias_l2
        }
    }
}

/// Runs `trials` independent estimates of `replicates` each (trial `m` uses
/// `NoiseStreams::new(seed).child(m)`) and pools all replicates with
/// Welford's update in trial-then-replicate order.
pub fn profile_estimator<S: Scalar>(
    kind: EstimatorKind,
    inst: &Instance<'_, S>,
    trials: usize,
    replicates: usize,
    seed: u64,
) -> Result<EstimatorProfile> {
    if trials == 0 || replicates == 0 {
        return Err(Error::Usage("profile needs at least one trial and one replicate".into()));
    }
    let exact: Vec<f64> = exact_grad_phi(inst, DEFAULT_ENUMERATION_CAP)?
        .flatten()
        .into_iter()
        .map(|v| v.as_f64())
        .collect();
    let mut mean = vec![0.0; exact.len()];
    let mut m2 = vec![0.0; exact.len()];
    let mut count = 0usize;
    let root = NoiseStreams::new(seed);
    for m in 0..trials {
        for_each_replicate(kind, inst, root.child(m as u64), replicates, &mut |g| {
            count += 1;
            let inv = 1.0 / count as f64;
            for ((mu, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(g) {
                let v = v.as_f64();
                let d = v - *mu;
                *mu += d * inv;
                *s += d * (v - *mu);
            }
        })?;
    }
    let bias_l2 = mean
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let variance_trace = m2.iter().sum::<f64>() / count as f64;
    Ok(EstimatorProfile {
        estimator: kind.name().to_string(),
        eps_or_tau: kind.setting(),
        replicates: count,
        bias_l2,
        variance_trace,
        exact_norm: exact.iter().map(|v| v * v).sum::<f64>().sqrt(),
        seed,
    })
}

pub fn write_profile_csv(rows: &[EstimatorProfile], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROFILE_CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.estimator.clone(),
            r.eps_or_tau.map(|v| v.to_string()).unwrap_or_default(),
            r.replicates.to_string(),
            format!("{:e}", r.bias_l2),
            format!("{:e}", r.variance_trace),
            format!("{:e}", r.exact_norm),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The small enumerable instance used for estimator profiling:
/// `T = 2`, `H = W = 4`, four classes, seed 1234. Weights are drawn at
/// 2.5x the default scale, then the last gaze layer is doubled and the last
/// recognition layer halved: `q` puts most of its mass on two to five cells
/// and the true-class log-likelihood spreads by about half a nat over the
/// latents.
#[derive(Clone, Debug)]
pub struct StandardInstance<S = f64> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    pub example: Example<S>,
    pub seed: u64,
}

impl<S: Scalar> StandardInstance<S> {
    pub fn instance(&self) -> Instance<'_, S> {
        Instance {
            cfg: &self.cfg,
            params: &self.params,
            example: &self.example,
        }
    }
}

pub fn standard_instance<S: Scalar>() -> Result<StandardInstance<S>> {
    let seed = 1234;
    let cfg = ModelConfig {
        t: 2,
        h: 4,
        w: 4,
        feat: 8,
        classes: 4,
        gaze_trunk: 8,
        gaze_head: 4,
        rec_features: 8,
        rec_head: 8,
        init_scale: 2.5,
        attn_bias_init: 0.0,
        attn_diag_init: 0.0,
        ..ModelConfig::default()
    };
    let task = TaskConfig {
        t: 2,
        h: 4,
        w: 4,
        feat: 8,
        classes: 4,
        train_size: 4,
        test_size: 1,
        seed,
        ..TaskConfig::default()
    };
    let example = generate_dataset::<S>(&task)?.train.examples.remove(0);
    let mut params = init_params(&cfg, seed)?;
    for (name, k) in [(GAZE_HEAD_W2, 2.0), (REC_HEAD_W2, 0.5)] {
        let k = S::lit(k);
        params.value_mut(name)?.data_mut().iter_mut().for_each(|v| *v = *v * k);
    }
    Ok(StandardInstance {
        cfg,
        params,
        example,
        seed,
    })
}

//! Gradient estimators for `grad_phi E_{z~q}[log p(y | x, z)]`.
//!
//! Every estimator works one replicate at a time. Replicate `r` of an
//! estimate driven by `streams` draws its Gumbel noise from
//! `streams.replicate(r)`, and per-replicate gradients are always reduced in
//! replicate order, so results do not depend on how work is scheduled.

mod direct;
mod oracle;
mod profile;
mod reinforce;
mod relaxed;

use rayon::prelude::*;

use crate::diffcore::{Group, ParamGrads, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{gaze_logits, ModelConfig};
use crate::rng::NoiseStreams;
use crate::scalar::Scalar;
use crate::synthtask::Example;

pub use direct::{direct_grad, direct_grad_batch, direct_pair, FTable};
pub use oracle::{class_decomposition, enumerated_expectation, exact_expected_loglik, exact_grad_phi, exact_loss};
pub use profile::{
    profile_estimator, standard_instance, write_profile_csv, EstimatorProfile, StandardInstance,
    PROFILE_CSV_HEADER,
};
pub use reinforce::{reinforce_grad, Baseline};
pub use relaxed::gumbel_softmax_grad;

/// One example together with the model that scores it.
#[derive(Clone, Copy, Debug)]
pub struct Instance<'a, S: Scalar> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamSet<S>,
    pub example: &'a Example<S>,
}

/// Which estimator to run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EstimatorKind {
    /// The enumeration oracle, repeated as if it were a sampler.
    Exact,
    Direct { eps: f64 },
    GumbelSoftmax { tau: f64 },
    Reinforce { baseline: Baseline },
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Direct { .. } => "direct",
            EstimatorKind::GumbelSoftmax { .. } => "gumbel-softmax",
            EstimatorKind::Reinforce { .. } => "reinforce",
        }
    }

    /// The eps or tau setting, when the estimator has one.
    pub fn setting(&self) -> Option<f64> {
        match *self {
            EstimatorKind::Direct { eps } => Some(eps),
            EstimatorKind::GumbelSoftmax { tau } => Some(tau),
            _ => None,
        }
    }
}

/// Monte-Carlo gradient of the expected class log-likelihood w.r.t. phi.
#[derive(Clone, Debug)]
pub struct GradEstimate<S = f64> {
    /// Replicate mean, phi parameters only.
    pub grads: ParamGrads<S>,
    pub eps: Option<f64>,
    pub tau: Option<f64>,
    pub replicates: usize,
    /// Flattened per-replicate gradients in replicate order, when requested.
    pub per_replicate: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> GradEstimate<S> {
    /// Mean of the retained replicates recomputed from scratch.
    pub fn replicate_mean(&self) -> Option<Vec<S>> {
        let reps = self.per_replicate.as_ref()?;
        let mut acc = vec![S::zero(); reps.first()?.len()];
        for r in reps {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a = *a + v;
            }
        }
        let inv = S::one() / S::from_usize(reps.len()).unwrap();
        Some(acc.into_iter().map(|a| a * inv).collect())
    }
}

/// Per-cell Jacobian of the gaze log-probabilities with respect to phi:
/// `row(t, c) = d log q_t(c) / d phi`, flattened in parameter-name order.
pub(crate) struct GazeJacobian<S: Scalar> {
    pub logq: Tensor<S>,
    cells: usize,
    rows: Vec<Vec<S>>,
}

impl<S: Scalar> GazeJacobian<S> {
    pub fn new(inst: &Instance<'_, S>) -> Result<Self> {
        let mut tape = Tape::new();
        let b = tape.bind_group(inst.params, Group::Phi);
        let x = tape.constant(inst.example.x.clone());
        let logq = gaze_logits(&mut tape, &b, inst.cfg, x)?;
        let lq = tape.value(logq).clone();
        let (t_len, cells) = (lq.shape()[0], lq.shape()[1]);
        let mut rows = Vec::with_capacity(t_len * cells);
        for i in 0..t_len * cells {
            let mut mask = vec![S::zero(); t_len * cells];
            mask[i] = S::one();
            let m = tape.constant(Tensor::new(vec![t_len, cells], mask)?);
            let picked = tape.mul(logq, m)?;
            let s = tape.reduce_sum(picked, None)?;
            let g = tape.backward(s, &b)?.restrict(Group::Phi);
            rows.push(g.flatten());
        }
        Ok(GazeJacobian { logq: lq, cells, rows })
    }

    pub fn row(&self, t: usize, cell: usize) -> &[S] {
        &self.rows[t * self.cells + cell]
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    /// `sum_{t,c} w[t, c] * row(t, c)`.
    pub fn contract(&self, weights: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.width()];
        for (row, &w) in self.rows.iter().zip(weights) {
            if w != S::zero() {
                for (o, &r) in out.iter_mut().zip(row) {
                    *o = *o + w * r;
                }
            }
        }
        out
    }
}

/// Replicates are evaluated in parallel blocks of this size.
pub(crate) const BLOCK: usize = 4096;

/// Evaluates `f(r)` for every `r` in `range` in parallel and returns the
/// results in replicate order.
pub(crate) fn ordered_map<T, F>(range: std::ops::Range<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    range.into_par_iter().map(&f).collect()
}

/// Splits `0..n` into consecutive blocks of at most [`BLOCK`] replicates.
pub(crate) fn blocks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(BLOCK).map(move |s| s..(s + BLOCK).min(n))
}

/// Drives the per-replicate gradients of `kind` into `sink`, in order.
pub fn for_each_replicate<S: Scalar>(
    kind: EstimatorKind,
    inst: &Instance<'_, S>,
    streams: NoiseStreams,
    replicates: usize,
    sink: &mut dyn FnMut(&[S]),
) -> Result<()> {
    if replicates == 0 {
        return Err(Error::Usage("at least one replicate is required".into()));
    }
    match kind {
        EstimatorKind::Exact => {
            let g = exact_grad_phi(inst, crate::latent::DEFAULT_ENUMERATION_CAP)?.flatten();
            for _ in 0..replicates {
                sink(&g);
            }
            Ok(())
        }
        EstimatorKind::Direct { eps } => direct::replicates(inst, S::lit(eps), streams, replicates, sink),
        EstimatorKind::GumbelSoftmax { tau } => relaxed::replicates(inst, S::lit(tau), streams, replicates, sink),
        EstimatorKind::Reinforce { baseline } => reinforce::replicates(inst, baseline, streams, replicates, sink),
    }
}

/// Replicate mean of `kind`, optionally retaining every replicate.
pub fn estimate<S: Scalar>(
    kind: EstimatorKind,
    inst: &Instance<'_, S>,
    streams: NoiseStreams,
    replicates: usize,
    keep_replicates: bool,
) -> Result<GradEstimate<S>> {
    let mut acc: Option<Vec<S>> = None;
    let mut kept = keep_replicates.then(Vec::new);
    for_each_replicate(kind, inst, streams, replicates, &mut |g| {
        let a = acc.get_or_insert_with(|| vec![S::zero(); g.len()]);
        for (a, &v) in a.iter_mut().zip(g) {
            *a = *a + v;
        }
        if let Some(k) = kept.as_mut() {
            k.push(g.to_vec());
        }
    })?;
    let inv = S::one() / S::from_usize(replicates).unwrap();
    let mean: Vec<S> = acc.unwrap_or_default().into_iter().map(|a| a * inv).collect();
    let template = inst.params.zero_grads().restrict(Group::Phi);
    Ok(GradEstimate {
        grads: template.unflatten_like(&mean)?,
        eps: matches!(kind, EstimatorKind::Direct { .. }).then(|| kind.setting()).flatten(),
        tau: matches!(kind, EstimatorKind::GumbelSoftmax { .. }).then(|| kind.setting()).flatten(),
        replicates,
        per_replicate: kept,
    })
}

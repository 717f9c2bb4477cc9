//! Gumbel-Softmax estimator: backprop through a relaxed sample.

use super::{blocks, ordered_map, EstimatorKind, GazeJacobian, GradEstimate, Instance};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_softmax, sample_gumbel};
use crate::model::class_loglik;
use crate::rng::NoiseStreams;
use crate::scalar::Scalar;

/// `d f^y(x, softmax((log q + g) / tau)) / d log q` for one noise draw.
fn logq_sensitivity<S: Scalar>(inst: &Instance<'_, S>, logq: &Tensor<S>, tau: S, stream: (u64, u64)) -> Result<Vec<S>> {
    let cfg = inst.cfg;
    let noise = sample_gumbel::<S>(cfg.dims()?, stream.0, stream.1);
    let mut tape = Tape::new();
    let b = tape.bind_frozen(inst.params);
    let lq = tape.leaf(logq.clone());
    let x = tape.constant(inst.example.x.clone());
    let z = gumbel_softmax(&mut tape, lq, &noise, tau)?;
    let lp = class_loglik(&mut tape, &b, cfg, x, Some(z))?;
    let mut mask = vec![S::zero(); cfg.classes];
    mask[inst.example.y] = S::one();
    let f = tape.gather_onehot(lp, &Tensor::new(vec![cfg.classes], mask)?, 0)?;
    let mut grads = tape.backward_all(f)?;
    Ok(grads[lq.index()]
        .take()
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![S::zero(); logq.len()]))
}

pub(crate) fn replicates<S: Scalar>(
    inst: &Instance<'_, S>,
    tau: S,
    streams: NoiseStreams,
    n: usize,
    sink: &mut dyn FnMut(&[S]),
) -> Result<()> {
    if !(tau > S::zero()) {
        return Err(Error::domain("gumbel-softmax-grad", format!("tau must be > 0, got {tau}")));
    }
    let jac = GazeJacobian::new(inst)?;
    for block in blocks(n) {
        let grads = ordered_map(block, |r| {
            let w = logq_sensitivity(inst, &jac.logq, tau, (streams.seed, streams.replicate(r as u64)))?;
            Ok(jac.contract(&w))
        })?;
        for g in &grads {
            sink(g);
        }
    }
    Ok(())
}

pub fn gumbel_softmax_grad<S: Scalar>(
    inst: &Instance<'_, S>,
    tau: f64,
    streams: NoiseStreams,
    replicates: usize,
    keep_replicates: bool,
) -> Result<GradEstimate<S>> {
    super::estimate(EstimatorKind::GumbelSoftmax { tau }, inst, streams, replicates, keep_replicates)
}

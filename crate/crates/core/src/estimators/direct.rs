//! Class-wise direct-optimization estimator.
//!
//! Per replicate: draw noise, take `z* = argmax(log q + g)`, tabulate the
//! true-class log-likelihood over the coordinate-sweep variants of `z*`,
//! take `z_eps = argmax(eps * f + log q + g)` with the same noise and return
//! `(grad h(z_eps) - grad h(z*)) / eps` with `h(z) = sum_t log q_t(z_t)`.

use super::{blocks, ordered_map, GazeJacobian, GradEstimate, Instance};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_argmax, perturbed_argmax, sample_gumbel};
use crate::latent::LatentIndex;
use crate::model::RecognitionEval;
use crate::rng::NoiseStreams;
use crate::scalar::Scalar;

/// Coordinate-sweep table of one class's log-likelihood around a base latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FTable<S = f64> {
    /// `[T, H*W]`: entry `(t, c)` scores `base` with timestep `t` moved to `c`.
    pub values: Tensor<S>,
    pub class: usize,
    pub base: LatentIndex,
}

impl<S: Scalar> FTable<S> {
    pub fn build(eval: &RecognitionEval<'_, S>, base: &LatentIndex, class: usize) -> Result<Self> {
        Ok(FTable {
            values: eval.f_table(base, class)?,
            class,
            base: base.clone(),
        })
    }
}

/// `(z*, z_eps)` for one replicate's noise.
pub fn direct_pair<S: Scalar>(
    eval: &RecognitionEval<'_, S>,
    logq: &Tensor<S>,
    inst: &Instance<'_, S>,
    eps: S,
    stream: (u64, u64),
) -> Result<(LatentIndex, LatentIndex)> {
    let noise = sample_gumbel::<S>(inst.cfg.dims()?, stream.0, stream.1);
    let z_star = gumbel_argmax(logq, &noise)?;
    let table = FTable::build(eval, &z_star, inst.example.y)?;
    let z_eps = perturbed_argmax(logq, &noise, eps, &table.values)?;
    Ok((z_star, z_eps))
}

fn replicate_grad<S: Scalar>(jac: &GazeJacobian<S>, z_star: &LatentIndex, z_eps: &LatentIndex, eps: S) -> Vec<S> {
    let mut g = vec![S::zero(); jac.width()];
    let inv = S::one() / eps;
    for (t, (&a, &b)) in z_eps.cells().iter().zip(z_star.cells()).enumerate() {
        if a != b {
            for ((o, &ra), &rb) in g.iter_mut().zip(jac.row(t, a)).zip(jac.row(t, b)) {
                *o = *o + (ra - rb) * inv;
            }
        }
    }
    g
}

pub(crate) fn replicates<S: Scalar>(
    inst: &Instance<'_, S>,
    eps: S,
    streams: NoiseStreams,
    n: usize,
    sink: &mut dyn FnMut(&[S]),
) -> Result<()> {
    if !(eps > S::zero()) {
        return Err(Error::domain("direct-grad", format!("eps must be > 0, got {eps}")));
    }
    let jac = GazeJacobian::new(inst)?;
    let eval = RecognitionEval::new(inst.cfg, inst.params, &inst.example.x)?;
    for block in blocks(n) {
        let pairs = ordered_map(block, |r| {
            direct_pair(&eval, &jac.logq, inst, eps, (streams.seed, streams.replicate(r as u64)))
        })?;
        for (z_star, z_eps) in &pairs {
            sink(&replicate_grad(&jac, z_star, z_eps, eps));
        }
    }
    Ok(())
}

/// Direct estimate from `replicates` noise draws.
pub fn direct_grad<S: Scalar>(
    inst: &Instance<'_, S>,
    eps: f64,
    streams: NoiseStreams,
    replicates: usize,
    keep_replicates: bool,
) -> Result<GradEstimate<S>> {
    super::estimate(super::EstimatorKind::Direct { eps }, inst, streams, replicates, keep_replicates)
}

/// Mean of per-example direct estimates; example `i` uses `streams.child(i)`.
pub fn direct_grad_batch<S: Scalar>(
    insts: &[Instance<'_, S>],
    eps: f64,
    streams: NoiseStreams,
    replicates: usize,
) -> Result<GradEstimate<S>> {
    let first = insts
        .first()
        .ok_or_else(|| Error::Usage("direct_grad_batch needs at least one example".into()))?;
    let mut total = first.params.zero_grads().restrict(crate::diffcore::Group::Phi);
    for (i, inst) in insts.iter().enumerate() {
        let g = direct_grad(inst, eps, streams.child(i as u64), replicates, false)?;
        total.add_assign(&g.grads)?;
    }
    total.scale(S::one() / S::from_usize(insts.len()).unwrap());
    Ok(GradEstimate {
        grads: total,
        eps: Some(eps),
        tau: None,
        replicates,
        per_replicate: None,
    })
}

//! Score-function (REINFORCE) estimator.

use super::{blocks, ordered_map, EstimatorKind, GazeJacobian, GradEstimate, Instance};
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_argmax, sample_gumbel};
use crate::model::RecognitionEval;
use crate::rng::NoiseStreams;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    None,
    Constant(f64),
    /// Running mean of `f` over the earlier replicates of the same estimate,
    /// starting from 0. It never depends on the current sample.
    MovingAverage,
}

pub(crate) fn replicates<S: Scalar>(
    inst: &Instance<'_, S>,
    baseline: Baseline,
    streams: NoiseStreams,
    n: usize,
    sink: &mut dyn FnMut(&[S]),
) -> Result<()> {
    if baseline == Baseline::MovingAverage && n < 2 {
        return Err(Error::Usage("a moving-average baseline needs at least two replicates".into()));
    }
    let jac = GazeJacobian::new(inst)?;
    let eval = RecognitionEval::new(inst.cfg, inst.params, &inst.example.x)?;
    let dims = inst.cfg.dims()?;
    let mut sum_f = S::zero();
    let mut seen = 0usize;
    for block in blocks(n) {
        let draws = ordered_map(block, |r| {
            let noise = sample_gumbel::<S>(dims, streams.seed, streams.replicate(r as u64));
            let z = gumbel_argmax(&jac.logq, &noise)?;
            let f = eval.class_loglik(&z)[inst.example.y];
            Ok((z, f))
        })?;
        for (z, f) in &draws {
            let b = match baseline {
                Baseline::None => S::zero(),
                Baseline::Constant(c) => S::lit(c),
                Baseline::MovingAverage if seen == 0 => S::zero(),
                Baseline::MovingAverage => sum_f / S::from_usize(seen).unwrap(),
            };
            let w = *f - b;
            let mut g = vec![S::zero(); jac.width()];
            if w != S::zero() {
                for (t, &c) in z.cells().iter().enumerate() {
                    for (o, &r) in g.iter_mut().zip(jac.row(t, c)) {
                        *o = *o + w * r;
                    }
                }
            }
            sink(&g);
            sum_f = sum_f + *f;
            seen += 1;
        }
    }
    Ok(())
}

pub fn reinforce_grad<S: Scalar>(
    inst: &Instance<'_, S>,
    baseline: Baseline,
    streams: NoiseStreams,
    replicates: usize,
    keep_replicates: bool,
) -> Result<GradEstimate<S>> {
    super::estimate(EstimatorKind::Reinforce { baseline }, inst, streams, replicates, keep_replicates)
}

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{class_loglik, gaze_logits, gaze_logprobs, RecognitionEval};
use super::prior::{gaze_kl_tape, GazeDistribution, GazePrior};
use crate::diffcore::{Bindings, ParamGrads, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_argmax, gumbel_softmax, perturbed_argmax, sample_gumbel};
use crate::latent::{onehot_tensor, LatentIndex};
use crate::rng::NoiseStreams;
use crate::scalar::Scalar;
use crate::synthtask::Example;

/// How the latent enters training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// Hard Gumbel-Max samples, phi trained with the direct estimator.
    Direct,
    /// Relaxed samples, everything trained by backprop.
    GumbelSoftmax,
    /// Attention built from the annotation; no gaze model.
    GtGaze,
    /// No attention at all.
    None,
}

impl EstimatorMode {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorMode::Direct => "direct",
            EstimatorMode::GumbelSoftmax => "gumbel-softmax",
            EstimatorMode::GtGaze => "gt-gaze",
            EstimatorMode::None => "none",
        }
    }

    pub fn uses_gaze_model(self) -> bool {
        matches!(self, EstimatorMode::Direct | EstimatorMode::GumbelSoftmax)
    }
}

impl std::fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings<S> {
    pub mode: EstimatorMode,
    /// Direct-estimator perturbation.
    pub eps: S,
    /// Gumbel-Softmax temperature.
    pub tau: S,
    /// Gumbel draws averaged per example.
    pub draws: usize,
}

#[derive(Clone, Debug)]
pub struct LossOutput<S = f64> {
    /// `nll + lambda_kl * kl`.
    pub loss: S,
    /// Negative class log-likelihood, averaged over draws.
    pub nll: S,
    pub kl: S,
    pub grads: ParamGrads<S>,
    /// Class scores from the last draw, for running train accuracy.
    pub class_logprobs: Vec<S>,
}

fn latent_of<S: Scalar>(tape: &mut Tape<S>, cfg: &ModelConfig, z: &LatentIndex) -> Result<Var> {
    Ok(tape.constant(onehot_tensor(z, cfg.dims()?)))
}

fn class_term<S: Scalar>(tape: &mut Tape<S>, logp: Var, y: usize, classes: usize) -> Result<Var> {
    let mut mask = vec![S::zero(); classes];
    mask[y] = S::one();
    tape.gather_onehot(logp, &Tensor::from_parts(vec![classes], mask), 0)
}

fn h_of<S: Scalar>(tape: &mut Tape<S>, logq: Var, cfg: &ModelConfig, z: &LatentIndex) -> Result<Var> {
    let mask = onehot_tensor(z, cfg.dims()?);
    let per_t = tape.gather_onehot(logq, &mask, 1)?;
    tape.reduce_sum(per_t, None)
}

/// Nodes of one recorded loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph<S> {
    /// Reported loss `nll + lambda_kl * kl`.
    pub value: Var,
    /// Node to differentiate: `value` plus, in direct mode, the estimator
    /// surrogate `-(h(z_eps) - h(z*)) / eps` for each draw where the two
    /// argmaxes differ.
    pub objective: Var,
    pub nll: S,
    pub kl: S,
}

/// Records the training loss of one example on `tape`. `params` must hold
/// the values bound in `b`; the direct estimator reads them for its
/// coordinate-sweep table.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bindings,
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    ex: &Example<S>,
    settings: &LossSettings<S>,
    streams: NoiseStreams,
    class_logprobs: &mut Vec<S>,
) -> Result<LossGraph<S>> {
    let dims = cfg.dims()?;
    if ex.y >= cfg.classes {
        return Err(Error::Data(format!("label {} out of range", ex.y)));
    }
    let x = tape.constant(ex.x.clone());
    let mut value_terms: Vec<Var> = Vec::new();
    let mut surrogate: Vec<Var> = Vec::new();
    let mut nll = S::zero();
    let mut kl = S::zero();
    let lambda = S::lit(cfg.lambda_kl);

    match settings.mode {
        EstimatorMode::None | EstimatorMode::GtGaze => {
            let z = match settings.mode {
                EstimatorMode::GtGaze => Some(latent_of(tape, cfg, &ex.gaze_gt)?),
                _ => None,
            };
            let logp = class_loglik(tape, b, cfg, x, z)?;
            let f = class_term(tape, logp, ex.y, cfg.classes)?;
            nll = -tape.value(f).item();
            *class_logprobs = tape.value(logp).data().to_vec();
            value_terms.push(tape.scalar_mul(f, -S::one()));
        }
        EstimatorMode::Direct | EstimatorMode::GumbelSoftmax => {
            let draws = settings.draws.max(1);
            let inv = S::one() / S::from_usize(draws).unwrap();
            let logq = gaze_logits(tape, b, cfg, x)?;
            let prior = GazePrior::for_config(cfg, Some(&ex.gaze_gt))?;
            let klv = gaze_kl_tape(tape, logq, &prior, cfg.gaze_supervision)?;
            kl = tape.value(klv).item();
            value_terms.push(tape.scalar_mul(klv, lambda));

            let eval = match settings.mode {
                EstimatorMode::Direct => {
                    if !(settings.eps > S::zero()) {
                        return Err(Error::domain("total-loss", "eps must be > 0"));
                    }
                    Some(RecognitionEval::new(cfg, params, &ex.x)?)
                }
                _ => None,
            };
            for r in 0..draws {
                let noise = sample_gumbel::<S>(dims, streams.seed, streams.replicate(r as u64));
                let z_in = match &eval {
                    Some(eval) => {
                        let lq = tape.value(logq).clone();
                        let z_star = gumbel_argmax(&lq, &noise)?;
                        let table = eval.f_table(&z_star, ex.y)?;
                        let z_eps = perturbed_argmax(&lq, &noise, settings.eps, &table)?;
                        if z_eps != z_star {
                            let he = h_of(tape, logq, cfg, &z_eps)?;
                            let hs = h_of(tape, logq, cfg, &z_star)?;
                            let d = tape.sub(he, hs)?;
                            surrogate.push(tape.scalar_mul(d, -inv / settings.eps));
                        }
                        latent_of(tape, cfg, &z_star)?
                    }
                    None => gumbel_softmax(tape, logq, &noise, settings.tau)?,
                };
                let logp = class_loglik(tape, b, cfg, x, Some(z_in))?;
                let f = class_term(tape, logp, ex.y, cfg.classes)?;
                nll = nll - tape.value(f).item() * inv;
                *class_logprobs = tape.value(logp).data().to_vec();
                value_terms.push(tape.scalar_mul(f, -inv));
            }
        }
    }

    let value = sum_nodes(tape, &value_terms)?;
    let objective = if surrogate.is_empty() {
        value
    } else {
        let s = sum_nodes(tape, &surrogate)?;
        tape.add(value, s)?
    };
    Ok(LossGraph {
        value,
        objective,
        nll,
        kl,
    })
}

fn sum_nodes<S: Scalar>(tape: &mut Tape<S>, nodes: &[Var]) -> Result<Var> {
    let mut total = nodes[0];
    for &t in &nodes[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Training loss for one example with gradients routed per `settings.mode`:
/// phi receives the direct estimate in direct mode and exact backprop
/// through the relaxed sample in gumbel-softmax mode; theta is always
/// trained by backprop through the latent actually used.
pub fn total_loss<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    ex: &Example<S>,
    settings: &LossSettings<S>,
    streams: NoiseStreams,
) -> Result<LossOutput<S>> {
    let mut tape = Tape::new();
    let b = tape.bind(params);
    let mut class_logprobs = Vec::new();
    let g = loss_graph(&mut tape, &b, params, cfg, ex, settings, streams, &mut class_logprobs)?;
    let grads = tape.backward(g.objective, &b)?;
    Ok(LossOutput {
        loss: tape.value(g.value).item(),
        nll: g.nll,
        kl: g.kl,
        grads,
        class_logprobs,
    })
}

/// Sigmoid attention values, `[T*H*W]`, all strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S = f64> {
    values: Vec<S>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.iter().any(|v| !(*v > S::zero() && *v < S::one())) {
            return Err(Error::Data("attention values must lie in (0, 1)".into()));
        }
        Ok(AttentionMap { values })
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// (min, max, mean).
    pub fn stats(&self) -> (f64, f64, f64) {
        let v: Vec<f64> = self.values.iter().map(|x| x.as_f64()).collect();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max, v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Prediction<S = f64> {
    pub class: usize,
    pub class_logprobs: Vec<S>,
    pub gaze: LatentIndex,
    /// Absent when attention is not used.
    pub attention: Option<AttentionMap<S>>,
}

/// How test-time gaze is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GazeDecode {
    /// Per-timestep argmax of q.
    Map,
    /// One Gumbel-Max sample from q.
    Sampled(NoiseStreams),
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Classifies one example. Gaze comes from q for the two latent modes and
/// from the annotation in gt-gaze mode; none mode still reports the MAP
/// gaze of the (untrained) gaze model for bookkeeping.
pub fn predict<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    ex: &Example<S>,
    mode: EstimatorMode,
    decode: GazeDecode,
) -> Result<Prediction<S>> {
    let eval = RecognitionEval::new(cfg, params, &ex.x)?;
    let gaze = match mode {
        EstimatorMode::GtGaze => ex.gaze_gt.clone(),
        _ => {
            let q = GazeDistribution::new(gaze_logprobs(cfg, params, &ex.x)?)?;
            match decode {
                GazeDecode::Map => q.map_index(),
                GazeDecode::Sampled(streams) => {
                    let noise = sample_gumbel::<S>(cfg.dims()?, streams.seed, streams.stream);
                    gumbel_argmax(q.logprobs(), &noise)?
                }
            }
        }
    };
    let (class_logprobs, attention) = match mode {
        EstimatorMode::None => (eval.class_loglik_plain(), None),
        _ => (eval.class_loglik(&gaze), Some(AttentionMap { values: eval.attention(&gaze) })),
    };
    Ok(Prediction {
        class: argmax(&class_logprobs),
        class_logprobs,
        gaze,
        attention,
    })
}

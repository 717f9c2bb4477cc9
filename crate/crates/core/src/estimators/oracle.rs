//! Exact expectations by enumerating every structured latent.

use super::Instance;
use crate::diffcore::{Bindings, Group, ParamGrads, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::latent::{enumerate_latents, onehot_tensor, LatentIndex};
use crate::model::{class_loglik, gaze_kl, gaze_logits, gaze_logprobs, GazeDistribution, GazePrior, RecognitionEval};
use crate::scalar::Scalar;

fn all_latents<S: Scalar>(inst: &Instance<'_, S>, cap: u64) -> Result<Vec<LatentIndex>> {
    Ok(enumerate_latents(inst.cfg.dims()?, cap)?.collect())
}

/// Records `sum_z q(z) f(z)` on `tape` for a `[T, H*W]` log-probability
/// node, where `q(z) = exp(sum_t logq[t, z_t])` and `f[k]` scores
/// `latents[k]`.
pub fn enumerated_expectation<S: Scalar>(
    tape: &mut Tape<S>,
    logq: Var,
    latents: &[LatentIndex],
    f: &[S],
) -> Result<Var> {
    let shape = tape.shape(logq).to_vec();
    if shape.len() != 2 || latents.len() != f.len() || latents.is_empty() {
        return Err(Error::shape(
            "enumerated-expectation",
            format!("logq {shape:?}, {} latents, {} scores", latents.len(), f.len()),
        ));
    }
    let (t_len, cells) = (shape[0], shape[1]);
    let width = t_len * cells;
    let k = latents.len();
    let mut selector = vec![S::zero(); k * width];
    for (i, z) in latents.iter().enumerate() {
        if z.len() != t_len || z.cells().iter().any(|&c| c >= cells) {
            return Err(Error::shape("enumerated-expectation", "latent outside logq shape"));
        }
        for (t, &c) in z.cells().iter().enumerate() {
            selector[i * width + t * cells + c] = S::one();
        }
    }
    let sel = tape.constant(Tensor::new(vec![k, width], selector)?);
    let flat = tape.reshape(logq, &[width, 1])?;
    let log_qz = tape.matmul(sel, flat)?;
    let qz = tape.exp(log_qz);
    let fz = tape.constant(Tensor::new(vec![k, 1], f.to_vec())?);
    let terms = tape.mul(qz, fz)?;
    tape.reduce_sum(terms, None)
}

fn expectation_node<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bindings,
    inst: &Instance<'_, S>,
    latents: &[LatentIndex],
) -> Result<Var> {
    let cfg = inst.cfg;
    let ex = inst.example;
    if ex.y >= cfg.classes {
        return Err(Error::Data(format!("label {} out of range", ex.y)));
    }
    let eval = RecognitionEval::new(cfg, inst.params, &ex.x)?;
    let x = tape.constant(ex.x.clone());
    let logq = gaze_logits(tape, b, cfg, x)?;
    let f: Vec<S> = latents.iter().map(|z| eval.class_loglik(z)[ex.y]).collect();
    enumerated_expectation(tape, logq, latents, &f)
}

/// `E_{z~q}[log p(y | x, z)]` summed over all `(H*W)^T` latents.
pub fn exact_expected_loglik<S: Scalar>(inst: &Instance<'_, S>, cap: u64) -> Result<S> {
    let latents = all_latents(inst, cap)?;
    let mut tape = Tape::new();
    let b = tape.bind_frozen(inst.params);
    let v = expectation_node(&mut tape, &b, inst, &latents)?;
    Ok(tape.value(v).item())
}

/// Exact phi-gradient of [`exact_expected_loglik`], differentiated on the tape.
pub fn exact_grad_phi<S: Scalar>(inst: &Instance<'_, S>, cap: u64) -> Result<ParamGrads<S>> {
    let latents = all_latents(inst, cap)?;
    let mut tape = Tape::new();
    let b = tape.bind_group(inst.params, Group::Phi);
    let v = expectation_node(&mut tape, &b, inst, &latents)?;
    Ok(tape.backward(v, &b)?.restrict(Group::Phi))
}

/// Exact training loss `-E_q[f^y] + lambda_kl * KL`.
pub fn exact_loss<S: Scalar>(inst: &Instance<'_, S>, cap: u64) -> Result<S> {
    let cfg = inst.cfg;
    let q = GazeDistribution::new(gaze_logprobs(cfg, inst.params, &inst.example.x)?)?;
    let prior = GazePrior::for_config(cfg, Some(&inst.example.gaze_gt))?;
    let kl = gaze_kl(&q, &prior, cfg.gaze_supervision)?;
    Ok(-exact_expected_loglik(inst, cap)? + S::lit(cfg.lambda_kl) * kl)
}

/// Class-wise form of the expectation:
/// `sum_c 1[y = c] sum_z P[z* = z] f^c(x, z)`, with `P[z* = z]` the product
/// of per-timestep softmax probabilities and `f^c` evaluated on the tape for
/// every class.
pub fn class_decomposition<S: Scalar>(inst: &Instance<'_, S>, cap: u64) -> Result<S> {
    let cfg = inst.cfg;
    let dims = cfg.dims()?;
    let logq = gaze_logprobs(cfg, inst.params, &inst.example.x)?;
    let cells = dims.cells();
    let mut inner = vec![S::zero(); cfg.classes];
    for z in enumerate_latents(dims, cap)? {
        let p: S = z
            .cells()
            .iter()
            .enumerate()
            .map(|(t, &cell)| logq.data()[t * cells + cell].exp())
            .fold(S::one(), |a, b| a * b);
        let mut tape = Tape::new();
        let b = tape.bind_frozen(inst.params);
        let x = tape.constant(inst.example.x.clone());
        let zv = tape.constant(onehot_tensor(&z, dims));
        let lp = class_loglik(&mut tape, &b, cfg, x, Some(zv))?;
        for (acc, &f) in inner.iter_mut().zip(tape.value(lp).data()) {
            *acc = *acc + p * f;
        }
    }
    let mut total = S::zero();
    for (c, &term) in inner.iter().enumerate() {
        let indicator = if c == inst.example.y { S::one() } else { S::zero() };
        total = total + indicator * term;
    }
    Ok(total)
}

//! Gumbel perturbations of per-timestep cell logits.
//!
//! Noise is i.i.d. per latent cell, so the structured perturbation of a
//! configuration is the sum of its per-timestep terms and every argmax below
//! decomposes into `T` independent per-timestep argmaxes.

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::latent::{LatentDims, LatentIndex};
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// Standard Gumbel draws laid out like the logits, `[T, H*W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise<S = f64> {
    values: Tensor<S>,
    pub seed: u64,
    pub stream: u64,
}

impl<S: Scalar> GumbelNoise<S> {
    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    /// Wraps externally chosen noise values (tests, replays).
    pub fn from_values(values: Tensor<S>) -> Result<Self> {
        if values.shape().len() != 2 || !values.all_finite() {
            return Err(Error::shape("gumbel-noise", format!("{:?}", values.shape())));
        }
        Ok(GumbelNoise {
            values,
            seed: 0,
            stream: 0,
        })
    }
}

/// One standard Gumbel draw via `-ln(-ln u)` with `u` uniform on the open
/// interval (0, 1).
pub fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

pub fn sample_gumbel<S: Scalar>(dims: LatentDims, seed: u64, stream: u64) -> GumbelNoise<S> {
    let mut rng = stream_rng(seed, stream);
    let data = (0..dims.total())
        .map(|_| S::lit(standard_gumbel(&mut rng)))
        .collect();
    GumbelNoise {
        values: Tensor::from_parts(vec![dims.t, dims.cells()], data),
        seed,
        stream,
    }
}

fn check_shapes<S: Scalar>(op: &'static str, logits: &Tensor<S>, other: &Tensor<S>) -> Result<()> {
    if logits.shape().len() != 2 || logits.shape() != other.shape() {
        return Err(Error::shape(
            op,
            format!("logits {:?} vs {:?}", logits.shape(), other.shape()),
        ));
    }
    Ok(())
}

/// Row-wise argmax with ties going to the smallest index.
fn argmax_rows<S: Scalar>(rows: usize, cols: usize, score: impl Fn(usize) -> S) -> LatentIndex {
    let cells = (0..rows)
        .map(|t| {
            let mut best = 0;
            let mut best_v = score(t * cols);
            for c in 1..cols {
                let v = score(t * cols + c);
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    LatentIndex::from_cells_unchecked(cells)
}

/// Gumbel-Max sample: per timestep, `argmax(logits + noise)`.
pub fn gumbel_argmax<S: Scalar>(logits: &Tensor<S>, noise: &GumbelNoise<S>) -> Result<LatentIndex> {
    check_shapes("gumbel-argmax", logits, &noise.values)?;
    let (l, g) = (logits.data(), noise.values.data());
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    Ok(argmax_rows(rows, cols, |i| l[i] + g[i]))
}

/// Perturbed argmax: per timestep, `argmax(eps * f + logits + noise)`.
///
/// The sum `logits + noise` is formed before adding `eps * f`, so with
/// `eps = 0` or a per-timestep constant `f` every comparison is identical to
/// [`gumbel_argmax`].
pub fn perturbed_argmax<S: Scalar>(
    logits: &Tensor<S>,
    noise: &GumbelNoise<S>,
    eps: S,
    f_table: &Tensor<S>,
) -> Result<LatentIndex> {
    check_shapes("perturbed-argmax", logits, &noise.values)?;
    check_shapes("perturbed-argmax", logits, f_table)?;
    if !(eps >= S::zero()) {
        return Err(Error::domain("perturbed-argmax", format!("eps must be >= 0, got {eps}")));
    }
    let (l, g, f) = (logits.data(), noise.values.data(), f_table.data());
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    if eps == S::zero() {
        return Ok(argmax_rows(rows, cols, |i| l[i] + g[i]));
    }
    // Per-row shift of f leaves the argmax unchanged and makes rows where f
    // is constant compare exactly like the unperturbed scores.
    let row_max: Vec<S> = f
        .chunks(cols)
        .map(|r| r.iter().copied().fold(S::neg_infinity(), S::max))
        .collect();
    Ok(argmax_rows(rows, cols, |i| {
        (l[i] + g[i]) + eps * (f[i] - row_max[i / cols])
    }))
}

/// Relaxed sample `softmax((logits + noise) / tau)` per timestep, recorded
/// on the tape so gradients reach whatever produced `logits`.
pub fn gumbel_softmax<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    noise: &GumbelNoise<S>,
    tau: S,
) -> Result<Var> {
    if !(tau > S::zero()) {
        return Err(Error::domain("gumbel-softmax", format!("tau must be > 0, got {tau}")));
    }
    check_shapes("gumbel-softmax", tape.value(logits), &noise.values)?;
    let g = tape.constant(noise.values.clone());
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scalar_mul(perturbed, S::one() / tau);
    let logp = tape.log_softmax(scaled, 1)?;
    Ok(tape.exp(logp))
}

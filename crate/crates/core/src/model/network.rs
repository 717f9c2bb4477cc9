//! Per-cell dense networks: the gaze model (phi) and the attention-gated
//! recognition model (theta).
//!
//! Inputs are `[T*H*W, feat]` feature rows. The gaze trunk and head run
//! identically on every cell and produce one logit per cell, normalised per
//! timestep. The recognition path projects every cell to `rec_features`
//! channels, gates them with the soft attention map computed from a latent,
//! mean-pools over all cells and classifies the pooled vector.

use rand::Rng;

use super::config::{Activation, ModelConfig, Residual};
use crate::diffcore::{matmul_raw, sigmoid, Bindings, Group, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::latent::LatentIndex;
use crate::rng::stream_rng;
use crate::scalar::Scalar;

pub const GAZE_TRUNK_W: &str = "gaze.trunk.w";
pub const GAZE_TRUNK_B: &str = "gaze.trunk.b";
pub const GAZE_HEAD_W1: &str = "gaze.head.w1";
pub const GAZE_HEAD_B1: &str = "gaze.head.b1";
pub const GAZE_HEAD_W2: &str = "gaze.head.w2";
pub const REC_PROJ_W: &str = "rec.proj.w";
pub const REC_PROJ_B: &str = "rec.proj.b";
pub const ATTN_FC_W: &str = "attn.fc.w";
pub const ATTN_FC_B: &str = "attn.fc.b";
pub const REC_HEAD_W1: &str = "rec.head.w1";
pub const REC_HEAD_B1: &str = "rec.head.b1";
pub const REC_HEAD_W2: &str = "rec.head.w2";
pub const REC_HEAD_B2: &str = "rec.head.b2";

struct Layout {
    name: &'static str,
    group: Group,
    shape: Vec<usize>,
    /// Some(fan_in) for weights, None for biases.
    fan_in: Option<usize>,
}

fn layout(cfg: &ModelConfig) -> Vec<Layout> {
    let n = cfg.t * cfg.h * cfg.w;
    let head_in = if cfg.rec_head == 0 { cfg.rec_features } else { cfg.rec_head };
    let mut v = vec![
        Layout { name: GAZE_TRUNK_W, group: Group::Phi, shape: vec![cfg.feat, cfg.gaze_trunk], fan_in: Some(cfg.feat) },
        Layout { name: GAZE_TRUNK_B, group: Group::Phi, shape: vec![cfg.gaze_trunk], fan_in: None },
        Layout { name: GAZE_HEAD_W1, group: Group::Phi, shape: vec![cfg.gaze_trunk, cfg.gaze_head], fan_in: Some(cfg.gaze_trunk) },
        Layout { name: GAZE_HEAD_B1, group: Group::Phi, shape: vec![cfg.gaze_head], fan_in: None },
        Layout { name: GAZE_HEAD_W2, group: Group::Phi, shape: vec![cfg.gaze_head, 1], fan_in: Some(cfg.gaze_head) },
        Layout { name: REC_PROJ_W, group: Group::Theta, shape: vec![cfg.feat, cfg.rec_features], fan_in: Some(cfg.feat) },
        Layout { name: REC_PROJ_B, group: Group::Theta, shape: vec![cfg.rec_features], fan_in: None },
        Layout { name: ATTN_FC_W, group: Group::Theta, shape: vec![n, n], fan_in: Some(cfg.t) },
        Layout { name: ATTN_FC_B, group: Group::Theta, shape: vec![n], fan_in: None },
        Layout { name: REC_HEAD_W2, group: Group::Theta, shape: vec![head_in, cfg.classes], fan_in: Some(head_in) },
        Layout { name: REC_HEAD_B2, group: Group::Theta, shape: vec![cfg.classes], fan_in: None },
    ];
    if cfg.rec_head > 0 {
        v.push(Layout { name: REC_HEAD_W1, group: Group::Theta, shape: vec![cfg.rec_features, cfg.rec_head], fan_in: Some(cfg.rec_features) });
        v.push(Layout { name: REC_HEAD_B1, group: Group::Theta, shape: vec![cfg.rec_head], fan_in: None });
    }
    v
}

/// Fan-in scaled uniform weights, zero biases (the attention bias starts at
/// `attn_bias_init`, and `attn_diag_init` is added to the FC diagonal). The attention FC counts `T` as its fan-in since a
/// one-hot latent activates exactly `T` of its rows.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<S>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (i, l) in layout(cfg).into_iter().enumerate() {
        let n: usize = l.shape.iter().product();
        let mut data: Vec<S> = match l.fan_in {
            Some(fan_in) => {
                let mut rng = stream_rng(seed, i as u64);
                let a = cfg.init_scale * (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| S::lit(rng.random_range(-1.0..1.0) * a)).collect()
            }
            None if l.name == ATTN_FC_B => vec![S::lit(cfg.attn_bias_init); n],
            None => vec![S::zero(); n],
        };
        if l.name == ATTN_FC_W {
            let side = l.shape[0];
            for k in 0..side {
                data[k * side + k] = data[k * side + k] + S::lit(cfg.attn_diag_init);
            }
        }
        params.insert(l.name, l.group, Tensor::new(l.shape, data)?)?;
    }
    Ok(params)
}

/// Checks that `params` has exactly the layout `cfg` expects.
pub fn check_params<S: Scalar>(cfg: &ModelConfig, params: &ParamSet<S>) -> Result<()> {
    let expected = layout(cfg);
    if expected.len() != params.len() {
        return Err(Error::Data(format!(
            "expected {} parameters, found {}",
            expected.len(),
            params.len()
        )));
    }
    for l in expected {
        let p = params
            .get(l.name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{}`", l.name)))?;
        if p.value.shape() != l.shape.as_slice() || p.group != l.group {
            return Err(Error::Data(format!(
                "parameter `{}` has shape {:?}/{:?}, expected {:?}/{:?}",
                l.name,
                p.value.shape(),
                p.group,
                l.shape,
                l.group
            )));
        }
    }
    Ok(())
}

fn check_input<S: Scalar>(cfg: &ModelConfig, x: &Tensor<S>) -> Result<()> {
    let n = cfg.t * cfg.h * cfg.w;
    if x.shape() != [n, cfg.feat] {
        return Err(Error::shape(
            "model-input",
            format!("expected [{n}, {}], got {:?}", cfg.feat, x.shape()),
        ));
    }
    Ok(())
}

fn dense<S: Scalar>(tape: &mut Tape<S>, input: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(input, w)?;
    match b {
        Some(b) => tape.bias_add(y, b),
        None => Ok(y),
    }
}

/// Per-timestep normalised gaze log-probabilities `[T, H*W]`.
pub fn gaze_logits<S: Scalar>(tape: &mut Tape<S>, b: &Bindings, cfg: &ModelConfig, x: Var) -> Result<Var> {
    check_input(cfg, tape.value(x))?;
    let h = dense(tape, x, b.var(GAZE_TRUNK_W)?, Some(b.var(GAZE_TRUNK_B)?))?;
    let h = tape.relu(h);
    let h = dense(tape, h, b.var(GAZE_HEAD_W1)?, Some(b.var(GAZE_HEAD_B1)?))?;
    let h = tape.relu(h);
    let logits = dense(tape, h, b.var(GAZE_HEAD_W2)?, None)?;
    let logits = tape.reshape(logits, &[cfg.t, cfg.h * cfg.w])?;
    tape.log_softmax(logits, 1)
}

/// Gaze log-probabilities without recording gradients.
pub fn gaze_logprobs<S: Scalar>(cfg: &ModelConfig, params: &ParamSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let b = tape.bind_frozen(params);
    let xv = tape.constant(x.clone());
    let out = gaze_logits(&mut tape, &b, cfg, xv)?;
    Ok(tape.value(out).clone())
}

/// Soft attention map `sigmoid(FC(flatten(z)))`, returned as a `[T*H*W]` vector.
/// `z` is `[T, H*W]`: one-hot, or simplex-valued rows for the relaxed path.
pub fn attention_map<S: Scalar>(tape: &mut Tape<S>, b: &Bindings, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let n = cfg.t * cfg.h * cfg.w;
    if tape.shape(z) != [cfg.t, cfg.h * cfg.w] {
        return Err(Error::shape("attention-map", format!("latent {:?}", tape.shape(z))));
    }
    let flat = tape.reshape(z, &[1, n])?;
    let s = dense(tape, flat, b.var(ATTN_FC_W)?, Some(b.var(ATTN_FC_B)?))?;
    let a = tape.sigmoid(s);
    tape.reshape(a, &[n])
}

/// Gates a `[N, D]` feature map with a length-`N` attention vector.
pub fn apply_attention<S: Scalar>(tape: &mut Tape<S>, residual: Residual, features: Var, attn: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 2 || tape.shape(attn) != [fs[0]] {
        return Err(Error::shape(
            "apply-attention",
            format!("features {fs:?} vs attention {:?}", tape.shape(attn)),
        ));
    }
    let col = tape.reshape(attn, &[fs[0], 1])?;
    let wide = tape.broadcast(col, &fs)?;
    match residual {
        Residual::MultiplicativeResidual => {
            let gated = tape.mul(features, wide)?;
            tape.add(features, gated)
        }
        Residual::Additive => tape.add(features, wide),
    }
}

/// Per-cell recognition feature map `[N, rec_features]`.
pub fn recognition_features<S: Scalar>(tape: &mut Tape<S>, b: &Bindings, cfg: &ModelConfig, x: Var) -> Result<Var> {
    check_input(cfg, tape.value(x))?;
    let f = dense(tape, x, b.var(REC_PROJ_W)?, Some(b.var(REC_PROJ_B)?))?;
    Ok(match cfg.rec_activation {
        Activation::Linear => f,
        Activation::Relu => tape.relu(f),
    })
}

fn recognition_head<S: Scalar>(tape: &mut Tape<S>, b: &Bindings, cfg: &ModelConfig, pooled: Var) -> Result<Var> {
    let d = tape.value(pooled).len();
    let mut h = tape.reshape(pooled, &[1, d])?;
    if cfg.rec_head > 0 {
        h = dense(tape, h, b.var(REC_HEAD_W1)?, Some(b.var(REC_HEAD_B1)?))?;
        h = tape.relu(h);
    }
    let logits = dense(tape, h, b.var(REC_HEAD_W2)?, Some(b.var(REC_HEAD_B2)?))?;
    let logp = tape.log_softmax(logits, 1)?;
    tape.reshape(logp, &[cfg.classes])
}

/// Class log-probabilities `[C]` given features `x` and an optional latent
/// `z` (`[T, H*W]`). Without a latent the attention stage is skipped.
pub fn class_loglik<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bindings,
    cfg: &ModelConfig,
    x: Var,
    z: Option<Var>,
) -> Result<Var> {
    let feats = recognition_features(tape, b, cfg, x)?;
    let gated = match z {
        Some(z) => {
            let attn = attention_map(tape, b, cfg, z)?;
            apply_attention(tape, cfg.residual, feats, attn)?
        }
        None => feats,
    };
    let pooled = tape.reduce_mean(gated, Some(0))?;
    recognition_head(tape, b, cfg, pooled)
}

/// Tape-free evaluation of the recognition path for one example and many
/// hard latents. Used for the coordinate-sweep tables and the enumeration
/// oracle; agrees with [`class_loglik`] up to float rounding.
pub struct RecognitionEval<'a, S: Scalar> {
    cfg: &'a ModelConfig,
    n: usize,
    d: usize,
    feats: Vec<S>,
    feat_sum: Vec<S>,
    fc_w: &'a [S],
    fc_b: &'a [S],
    head_w1: Option<(&'a [S], &'a [S])>,
    head_w2: &'a [S],
    head_b2: &'a [S],
}

impl<'a, S: Scalar> RecognitionEval<'a, S> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamSet<S>, x: &Tensor<S>) -> Result<Self> {
        check_input(cfg, x)?;
        let n = x.shape()[0];
        let d = cfg.rec_features;
        let w = params.value(REC_PROJ_W)?.data();
        let bias = params.value(REC_PROJ_B)?.data();
        let mut feats = matmul_raw(x.data(), w, n, cfg.feat, d);
        for row in feats.chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
                if cfg.rec_activation == Activation::Relu {
                    *v = v.max(S::zero());
                }
            }
        }
        let mut feat_sum = vec![S::zero(); d];
        for row in feats.chunks(d) {
            for (s, &v) in feat_sum.iter_mut().zip(row) {
                *s = *s + v;
            }
        }
        let head_w1 = if cfg.rec_head > 0 {
            Some((params.value(REC_HEAD_W1)?.data(), params.value(REC_HEAD_B1)?.data()))
        } else {
            None
        };
        Ok(RecognitionEval {
            cfg,
            n,
            d,
            feats,
            feat_sum,
            fc_w: params.value(ATTN_FC_W)?.data(),
            fc_b: params.value(ATTN_FC_B)?.data(),
            head_w1,
            head_w2: params.value(REC_HEAD_W2)?.data(),
            head_b2: params.value(REC_HEAD_B2)?.data(),
        })
    }

    /// Attention map for a hard latent, `[T*H*W]`.
    pub fn attention(&self, z: &LatentIndex) -> Vec<S> {
        let cells = self.cfg.h * self.cfg.w;
        let mut s = vec![S::zero(); self.n];
        for (t, &c) in z.cells().iter().enumerate() {
            let row = &self.fc_w[(t * cells + c) * self.n..][..self.n];
            for (a, &w) in s.iter_mut().zip(row) {
                *a = *a + w;
            }
        }
        for (a, &b) in s.iter_mut().zip(self.fc_b) {
            *a = sigmoid(*a + b);
        }
        s
    }

    fn head(&self, pooled: &[S]) -> Vec<S> {
        let c = self.cfg.classes;
        let hidden = match self.head_w1 {
            Some((w1, b1)) => {
                let r = self.cfg.rec_head;
                let mut h = matmul_raw(pooled, w1, 1, self.d, r);
                for (v, &b) in h.iter_mut().zip(b1) {
                    *v = (*v + b).max(S::zero());
                }
                h
            }
            None => pooled.to_vec(),
        };
        let mut logits = matmul_raw(&hidden, self.head_w2, 1, hidden.len(), c);
        for (v, &b) in logits.iter_mut().zip(self.head_b2) {
            *v = *v + b;
        }
        let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        logits.iter().map(|&v| v - lse).collect()
    }

    fn pooled(&self, attn: Option<&[S]>) -> Vec<S> {
        let inv = S::one() / S::from_usize(self.n).unwrap();
        let mut pooled = self.feat_sum.clone();
        if let Some(a) = attn {
            match self.cfg.residual {
                Residual::MultiplicativeResidual => {
                    for (row, &ai) in self.feats.chunks(self.d).zip(a) {
                        for (p, &g) in pooled.iter_mut().zip(row) {
                            *p = *p + ai * g;
                        }
                    }
                }
                Residual::Additive => {
                    let total: S = a.iter().copied().sum();
                    pooled.iter_mut().for_each(|p| *p = *p + total);
                }
            }
        }
        pooled.iter_mut().for_each(|p| *p = *p * inv);
        pooled
    }

    /// Class log-probabilities for a hard latent.
    pub fn class_loglik(&self, z: &LatentIndex) -> Vec<S> {
        let a = self.attention(z);
        self.head(&self.pooled(Some(&a)))
    }

    /// Class log-probabilities with the attention stage skipped.
    pub fn class_loglik_plain(&self) -> Vec<S> {
        self.head(&self.pooled(None))
    }

    /// `table[t, cell] = log p(class | x, base with timestep t moved to cell)`,
    /// one evaluation per coordinate-sweep variant.
    pub fn f_table(&self, base: &LatentIndex, class: usize) -> Result<Tensor<S>> {
        let (t_len, cells) = (self.cfg.t, self.cfg.h * self.cfg.w);
        if base.len() != t_len || class >= self.cfg.classes {
            return Err(Error::Usage("f_table: latent or class out of range".into()));
        }
        let mut out = Vec::with_capacity(t_len * cells);
        for t in 0..t_len {
            for c in 0..cells {
                out.push(self.class_loglik(&base.with_cell(t, c))[class]);
            }
        }
        let table = Tensor::new(vec![t_len, cells], out)?;
        if !table.all_finite() {
            return Err(Error::Evaluation("non-finite f-table".into()));
        }
        Ok(table)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentDims;

/// How the soft attention map modulates the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Residual {
    /// `features + features * attn`
    MultiplicativeResidual,
    /// `features + attn`, broadcast over channels
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Relu,
}

/// Which divergence ties the gaze distribution to the annotation prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GazeSupervision {
    /// `KL[q || prior]`
    ReverseKl,
    /// `KL[prior || q]`, i.e. cross-entropy of q against the prior.
    ForwardCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Input channels per cell.
    pub feat: usize,
    pub classes: usize,
    /// Hidden width of the per-cell gaze trunk.
    pub gaze_trunk: usize,
    /// Hidden width of the per-cell gaze head.
    pub gaze_head: usize,
    /// Channels of the per-cell recognition feature map.
    pub rec_features: usize,
    /// Activation applied to the recognition feature map before gating.
    pub rec_activation: Activation,
    /// Hidden width of the pooled recognition head; 0 means a linear head.
    pub rec_head: usize,
    pub residual: Residual,
    /// Initial bias of the attention FC layer.
    pub attn_bias_init: f64,
    /// Added to the diagonal of the attention FC at initialisation, so each
    /// cell starts out gated by whether the latent points at it.
    pub attn_diag_init: f64,
    /// Scale applied to the default fan-in initialisation of every weight.
    pub init_scale: f64,
    pub lambda_kl: f64,
    pub gaze_supervision: GazeSupervision,
    /// Side of the box blur applied to annotated gaze (odd).
    pub prior_kernel: usize,
    /// Floor mixed into the annotation prior.
    pub prior_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 3,
            h: 7,
            w: 7,
            feat: 16,
            classes: 10,
            gaze_trunk: 16,
            gaze_head: 8,
            rec_features: 16,
            rec_activation: Activation::Linear,
            rec_head: 32,
            residual: Residual::MultiplicativeResidual,
            attn_bias_init: -3.0,
            attn_diag_init: 6.0,
            init_scale: 1.0,
            lambda_kl: 1.0,
            gaze_supervision: GazeSupervision::ReverseKl,
            prior_kernel: 3,
            prior_floor: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> Result<LatentDims> {
        LatentDims::new(self.t, self.h, self.w)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        let widths = [
            ("feat", self.feat),
            ("gaze_trunk", self.gaze_trunk),
            ("gaze_head", self.gaze_head),
            ("rec_features", self.rec_features),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        if !(self.lambda_kl >= 0.0) || !(self.init_scale >= 0.0) || !self.attn_bias_init.is_finite() || !self.attn_diag_init.is_finite() {
            return Err(Error::Config("lambda_kl and init_scale must be non-negative and the attention init values finite".into()));
        }
        if self.prior_kernel == 0 || self.prior_kernel.is_multiple_of(2) {
            return Err(Error::Config("prior_kernel must be odd".into()));
        }
        let cells = (self.h * self.w) as f64;
        if !(self.prior_floor > 0.0) || self.prior_floor * cells >= 1.0 {
            return Err(Error::Config(format!(
                "prior_floor must lie in (0, 1/(H*W)), got {}",
                self.prior_floor
            )));
        }
        Ok(())
    }
}

//! Gaze model, attention-gated recognition model and the training loss.

mod config;
mod loss;
mod network;
mod prior;

pub use config::{Activation, GazeSupervision, ModelConfig, Residual};
pub use loss::{loss_graph, predict, total_loss, AttentionMap, LossGraph, EstimatorMode, GazeDecode, LossOutput, LossSettings, Prediction};
pub use network::*;
pub use prior::{gaze_kl, gaze_kl_tape, GazeDistribution, GazePrior, PriorSource};

#[cfg(test)]
mod tests;

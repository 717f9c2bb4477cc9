use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::overrides::apply_overrides;
use crate::error::{Error, Result};
use crate::model::{EstimatorMode, ModelConfig};
use crate::synthtask::TaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the run after which the step size is multiplied by `lr_drop_factor`.
    pub lr_drops: Vec<f64>,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
            lr_drops: vec![0.45, 0.83],
            lr_drop_factor: 0.1,
        }
    }
}

/// `eps(i) = max(floor, start * exp(-rate * i))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsSchedule {
    pub start: f64,
    pub rate: f64,
    pub floor: f64,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        EpsSchedule {
            start: 1000.0,
            rate: 0.001,
            floor: 0.1,
        }
    }
}

/// Settings for the `profile` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub trials: usize,
    pub replicates: usize,
    pub eps: Vec<f64>,
    pub tau: Vec<f64>,
    pub reinforce: bool,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            trials: 1,
            replicates: 200_000,
            eps: vec![10.0, 1.0, 0.1],
            tau: vec![2.0],
            reinforce: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub mode: EstimatorMode,
    pub optimizer: OptimizerConfig,
    pub eps: EpsSchedule,
    pub tau: f64,
    /// Gumbel draws per example per step.
    pub draws: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Directory holding `train.jsonl` and `test.jsonl`; generated from `task` when absent.
    pub data_dir: Option<PathBuf>,
    /// Test-set evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Intermediate checkpoint period; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub profile: ProfileConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            mode: EstimatorMode::Direct,
            optimizer: OptimizerConfig::default(),
            eps: EpsSchedule::default(),
            tau: 2.0,
            draws: 1,
            iterations: 6000,
            batch_size: 32,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data_dir: None,
            eval_every: 500,
            checkpoint_every: 0,
            profile: ProfileConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file (if any), then dotted `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        apply_overrides(&mut doc, overrides)?;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let m = &self.model;
        let t = &self.task;
        if (m.t, m.h, m.w, m.feat, m.classes) != (t.t, t.h, t.w, t.feat, t.classes) {
            return Err(Error::Config(format!(
                "model dims (t={}, h={}, w={}, feat={}, classes={}) do not match task dims (t={}, h={}, w={}, feat={}, classes={})",
                m.t, m.h, m.w, m.feat, m.classes, t.t, t.h, t.w, t.feat, t.classes
            )));
        }
        let e = &self.eps;
        if !(e.floor > 0.0) || !(e.start >= e.floor) || !(e.rate >= 0.0) || !e.start.is_finite() {
            return Err(Error::Config(format!(
                "eps schedule needs start >= floor > 0 and rate >= 0, got {e:?}"
            )));
        }
        if self.batch_size == 0 || self.draws == 0 {
            return Err(Error::Config("batch_size and draws must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.lr_drop_factor > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        if o.lr_drops.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("lr_drops are fractions in [0, 1]".into()));
        }
        Ok(())
    }
}

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use super::metrics::{MetricsRow, MetricsWriter};
use crate::diffcore::{save_checkpoint, ParamGrads, ParamSet};
use crate::error::{Error, Result};
use crate::model::{init_params, total_loss, EstimatorMode, LossOutput, LossSettings};
use crate::rng::{derive_stream, stream_rng, NoiseStreams};
use crate::synthtask::{generate_dataset, read_jsonl, Dataset};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "eval.json";

const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// What `eval.json` holds after a completed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: EstimatorMode,
    pub seed: u64,
    pub iterations: usize,
    pub final_eps: f64,
    pub tau: f64,
    pub wall_time_secs: f64,
    pub test: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet<f64>,
    pub summary: RunSummary,
}

/// Train and test splits: read from `data_dir` when set, generated from the task otherwise.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let (train, test) = match &cfg.data_dir {
        Some(dir) => (
            read_jsonl(&dir.join("train.jsonl"), cfg.task.classes)?,
            read_jsonl(&dir.join("test.jsonl"), cfg.task.classes)?,
        ),
        None => {
            let d = generate_dataset::<f64>(&cfg.task)?;
            (d.train, d.test)
        }
    };
    let dims = cfg.model.dims()?;
    for d in [&train, &test] {
        if d.dims != dims || d.feat != cfg.model.feat {
            return Err(Error::Config(format!(
                "dataset dims {:?} x {} do not match model dims {:?} x {}",
                d.dims, d.feat, dims, cfg.model.feat
            )));
        }
    }
    Ok((train, test))
}

/// Epoch-wise shuffled minibatches; epoch `e` is a fresh permutation from
/// its own stream.
struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                let mut rng = stream_rng(self.seed, derive_stream(SHUFFLE_STREAM, self.epoch));
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(params: &ParamSet<f64>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }

    fn step(&mut self, params: &mut ParamSet<f64>, grads: &ParamGrads<f64>, lr: f64) -> Result<()> {
        for ((name, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Usage(format!("gradient for `{name}` missing")))?;
            for ((w, vel), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + gi + self.weight_decay * *w;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

struct StepStats {
    loss: f64,
    nll: f64,
    kl: f64,
    train_acc: f64,
    grads: ParamGrads<f64>,
}

fn reduce(outs: Vec<LossOutput<f64>>, labels: &[usize]) -> Result<StepStats> {
    let n = outs.len() as f64;
    let mut iter = outs.into_iter().zip(labels);
    let (first, &y0) = iter.next().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
    };
    let mut s = StepStats {
        loss: first.loss,
        nll: first.nll,
        kl: first.kl,
        train_acc: (argmax(&first.class_logprobs) == y0) as u8 as f64,
        grads: first.grads,
    };
    for (o, &y) in iter {
        s.loss += o.loss;
        s.nll += o.nll;
        s.kl += o.kl;
        s.train_acc += (argmax(&o.class_logprobs) == y) as u8 as f64;
        s.grads.add_assign(&o.grads)?;
    }
    s.loss /= n;
    s.nll /= n;
    s.kl /= n;
    s.train_acc /= n;
    s.grads.scale(1.0 / n);
    Ok(s)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Runs the configured training and writes the run directory:
/// `config.resolved.json`, `metrics.csv`, `checkpoint.json` (plus
/// `checkpoint-<iter>.json` every `checkpoint_every` steps) and `eval.json`.
///
/// A non-finite loss or gradient stops the run with [`Error::Divergence`]
/// after saving the last finite parameters to `checkpoint.json`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_json(cfg, &out.join(CONFIG_FILE))?;
    let (train_set, test_set) = load_data(cfg)?;

    let model = &cfg.model;
    let mut params = init_params(model, cfg.seed)?;
    let mut sgd = Sgd::new(&params, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let mut sampler = BatchSampler::new(train_set.examples.len(), cfg.seed);
    let noise = NoiseStreams::new(cfg.seed).child(NOISE_STREAM);

    let mut last_report = None;
    let mut eps = cfg.eps.at(0)?;
    for iter in 0..cfg.iterations {
        eps = cfg.eps.at(iter)?;
        let lr = cfg.optimizer.lr_at(iter, cfg.iterations);
        let settings = LossSettings {
            mode: cfg.mode,
            eps,
            tau: cfg.tau,
            draws: cfg.draws,
        };
        let batch = sampler.next_batch(cfg.batch_size);
        let step_noise = noise.child(iter as u64);
        let outs = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| total_loss(model, &params, &train_set.examples[i], &settings, step_noise.child(k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| train_set.examples[i].y).collect();
        let stats = reduce(outs, &labels)?;
        if !stats.loss.is_finite() || !stats.grads.flatten().iter().all(|g| g.is_finite()) {
            save_checkpoint(&params, &out.join(CHECKPOINT_FILE))?;
            return Err(Error::Divergence { iter });
        }
        sgd.step(&mut params, &stats.grads, lr)?;

        let done = iter + 1;
        let eval_now = done == cfg.iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let report = if eval_now {
            Some(evaluate(model, &params, &test_set, cfg.mode)?)
        } else {
            None
        };
        metrics.push(&MetricsRow {
            iter,
            loss: stats.loss,
            nll: stats.nll,
            kl: stats.kl,
            eps,
            lr,
            train_acc: stats.train_acc,
            test_acc: report.as_ref().map(|r| r.accuracy.acc),
            test_acc_star: report.as_ref().map(|r| r.accuracy.acc_star),
        })?;
        if report.is_some() {
            last_report = report;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.iterations {
            save_checkpoint(&params, &out.join(format!("checkpoint-{done}.json")))?;
        }
    }
    save_checkpoint(&params, &out.join(CHECKPOINT_FILE))?;
    let test = match last_report {
        Some(r) => r,
        None => evaluate(model, &params, &test_set, cfg.mode)?,
    };
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        iterations: cfg.iterations,
        final_eps: eps,
        tau: cfg.tau,
        wall_time_secs: started.elapsed().as_secs_f64(),
        test,
    };
    write_json(&summary, &out.join(SUMMARY_FILE))?;
    Ok(TrainOutcome { params, summary })
}

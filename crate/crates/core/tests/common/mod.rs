//! Shared fixtures for the integration targets.
#![allow(dead_code)]

use std::path::Path;

use gaze_core::diffcore::{finite_difference_check, Bindings, Group, ParamSet, Tape, Tensor, Var};
use gaze_core::harness::RunConfig;
use gaze_core::model::ModelConfig;
use gaze_core::rng::stream_rng;
use gaze_core::synthtask::TaskConfig;
use gaze_core::Result;
use rand::Rng;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &Bindings) -> Result<Var>>;

/// A named primitive under test: parameters to perturb and a scalar-valued
/// function that applies the primitive and contracts its output with fixed
/// random weights.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub params: ParamSet<f64>,
    pub build: Build,
}

fn values(seed: u64, stream: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Entries in `[-2, -0.1] U [0.1, 2]`, away from the relu kink.
fn off_zero(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    values(seed, stream, n, 0.1, 2.0)
        .into_iter()
        .zip(values(seed, stream + 100, n, 0.0, 1.0))
        .map(|(v, s)| if s < 0.5 { -v } else { v })
        .collect()
}

fn params(seed: u64, specs: &[(&str, Vec<usize>, (f64, f64))]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, (name, shape, (lo, hi))) in specs.iter().enumerate() {
        let n = shape.iter().product();
        let v = values(seed, i as u64, n, *lo, *hi);
        p.insert(*name, Group::Theta, Tensor::from_f64(shape.clone(), &v).unwrap()).unwrap();
    }
    p
}

/// `sum(w * y)` with weights drawn from `seed`.
fn contract(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(Tensor::from_f64(shape, &values(seed, 999, n, -1.0, 1.0))?);
    let prod = tape.mul(y, w)?;
    tape.reduce_sum(prod, None)
}

const STD: (f64, f64) = (-1.5, 1.5);
const POS: (f64, f64) = (0.3, 2.5);

/// Every differentiable primitive on the tape, with inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut cases: Vec<PrimitiveCase> = Vec::new();
    let mut push = |name: &'static str, params: ParamSet<f64>, build: Build| cases.push(PrimitiveCase { name, params, build });

    push("matmul", params(seed, &[("a", vec![3, 4], STD), ("b", vec![4, 2], STD)]), Box::new(move |t, b| {
        let y = t.matmul(b.var("a")?, b.var("b")?)?;
        contract(t, y, seed)
    }));
    push("bias-add", params(seed, &[("a", vec![3, 4], STD), ("b", vec![4], STD)]), Box::new(move |t, b| {
        let y = t.bias_add(b.var("a")?, b.var("b")?)?;
        contract(t, y, seed)
    }));
    let mut relu_in = ParamSet::new();
    relu_in.insert("a", Group::Theta, Tensor::from_f64(vec![6], &off_zero(seed, 7, 6)).unwrap()).unwrap();
    push("relu", relu_in, Box::new(move |t, b| {
        let y = t.relu(b.var("a")?);
        contract(t, y, seed)
    }));
    push("sigmoid", params(seed, &[("a", vec![6], (-4.0, 4.0))]), Box::new(move |t, b| {
        let y = t.sigmoid(b.var("a")?);
        contract(t, y, seed)
    }));
    push("exp", params(seed, &[("a", vec![6], STD)]), Box::new(move |t, b| {
        let y = t.exp(b.var("a")?);
        contract(t, y, seed)
    }));
    push("log", params(seed, &[("a", vec![6], POS)]), Box::new(move |t, b| {
        let y = t.log(b.var("a")?)?;
        contract(t, y, seed)
    }));
    push("elementwise-mul", params(seed, &[("a", vec![2, 3], STD), ("b", vec![2, 3], STD)]), Box::new(move |t, b| {
        let y = t.mul(b.var("a")?, b.var("b")?)?;
        contract(t, y, seed)
    }));
    push("add", params(seed, &[("a", vec![2, 3], STD), ("b", vec![2, 3], STD)]), Box::new(move |t, b| {
        let y = t.add(b.var("a")?, b.var("b")?)?;
        contract(t, y, seed)
    }));
    push("sub", params(seed, &[("a", vec![2, 3], STD), ("b", vec![2, 3], STD)]), Box::new(move |t, b| {
        let y = t.sub(b.var("a")?, b.var("b")?)?;
        contract(t, y, seed)
    }));
    push("scalar-mul", params(seed, &[("a", vec![5], STD)]), Box::new(move |t, b| {
        let y = t.scalar_mul(b.var("a")?, -1.7);
        contract(t, y, seed)
    }));
    for (name, axis) in [("reduce-sum/all", None), ("reduce-sum/0", Some(0)), ("reduce-sum/1", Some(1))] {
        push(name, params(seed, &[("a", vec![3, 4], STD)]), Box::new(move |t, b| {
            let y = t.reduce_sum(b.var("a")?, axis)?;
            contract(t, y, seed)
        }));
    }
    for (name, axis) in [("reduce-mean/all", None), ("reduce-mean/1", Some(1))] {
        push(name, params(seed, &[("a", vec![3, 4], STD)]), Box::new(move |t, b| {
            let y = t.reduce_mean(b.var("a")?, axis)?;
            contract(t, y, seed)
        }));
    }
    for (name, axis) in [("log-softmax/0", 0), ("log-softmax/1", 1), ("log-softmax/3d", 1)] {
        let shape = if name.ends_with("3d") { vec![2, 3, 4] } else { vec![3, 4] };
        push(name, params(seed, &[("a", shape, (-3.0, 3.0))]), Box::new(move |t, b| {
            let y = t.log_softmax(b.var("a")?, axis)?;
            contract(t, y, seed)
        }));
    }
    push("gather-by-onehot", params(seed, &[("a", vec![3, 4], STD)]), Box::new(move |t, b| {
        let mut mask = vec![0.0; 12];
        for (r, c) in [(0, 2), (1, 0), (2, 3)] {
            mask[r * 4 + c] = 1.0;
        }
        let y = t.gather_onehot(b.var("a")?, &Tensor::from_f64(vec![3, 4], &mask)?, 1)?;
        contract(t, y, seed)
    }));
    push("broadcast/rows", params(seed, &[("a", vec![1, 4], STD)]), Box::new(move |t, b| {
        let y = t.broadcast(b.var("a")?, &[3, 4])?;
        contract(t, y, seed)
    }));
    push("broadcast/leading", params(seed, &[("a", vec![4], STD)]), Box::new(move |t, b| {
        let y = t.broadcast(b.var("a")?, &[2, 3, 4])?;
        contract(t, y, seed)
    }));
    push("reshape", params(seed, &[("a", vec![3, 4], STD)]), Box::new(move |t, b| {
        let y = t.reshape(b.var("a")?, &[2, 6])?;
        contract(t, y, seed)
    }));
    cases
}

/// Worst central-difference relative error over one primitive case.
pub fn primitive_fd_error(case: &PrimitiveCase) -> f64 {
    finite_difference_check(&case.params, 1e-5, None, |t, b| (case.build)(t, b))
        .unwrap()
        .max_rel_error
}

/// A run small enough to train in well under a second.
pub fn small_run(dir: &Path) -> RunConfig {
    let task = TaskConfig {
        t: 2,
        h: 4,
        w: 4,
        feat: 8,
        classes: 4,
        train_size: 64,
        test_size: 32,
        seed: 5,
        ..TaskConfig::default()
    };
    RunConfig {
        model: ModelConfig {
            t: 2,
            h: 4,
            w: 4,
            feat: 8,
            classes: 4,
            gaze_trunk: 8,
            gaze_head: 4,
            rec_features: 8,
            rec_head: 8,
            ..ModelConfig::default()
        },
        task,
        iterations: 25,
        batch_size: 8,
        eval_every: 10,
        seed: 3,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

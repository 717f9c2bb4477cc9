use super::*;
use crate::diffcore::{finite_difference_check, Group, ParamSet, Tape, Tensor};
use crate::latent::{onehot_tensor, LatentIndex};
use crate::rng::NoiseStreams;
use crate::synthtask::{generate_dataset, Example, TaskConfig};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        t: 2,
        h: 3,
        w: 3,
        feat: 5,
        classes: 3,
        gaze_trunk: 6,
        gaze_head: 4,
        rec_features: 4,
        rec_head: 5,
        ..ModelConfig::default()
    }
}

fn small_example(cfg: &ModelConfig) -> Example<f64> {
    let task = TaskConfig {
        t: cfg.t,
        h: cfg.h,
        w: cfg.w,
        feat: cfg.feat,
        classes: cfg.classes,
        train_size: 4,
        test_size: 1,
        seed: 3,
        ..TaskConfig::default()
    };
    generate_dataset::<f64>(&task).unwrap().train.examples.remove(1)
}

fn zero(params: &mut ParamSet<f64>, name: &str) {
    params.value_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn settings(mode: EstimatorMode) -> LossSettings<f64> {
    LossSettings {
        mode,
        eps: 0.5,
        tau: 2.0,
        draws: 2,
    }
}

#[test]
fn init_layout_matches_check() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 0).unwrap();
    check_params(&cfg, &p).unwrap();
    assert_eq!(p.numel(Some(Group::Phi)), 5 * 6 + 6 + 6 * 4 + 4 + 4);
    let mut wrong = cfg.clone();
    wrong.rec_head = 0;
    assert!(check_params(&wrong, &p).is_err());
    assert_eq!(init_params::<f64>(&cfg, 0).unwrap(), p);
    assert_ne!(init_params::<f64>(&cfg, 1).unwrap(), p);
}

#[test]
fn zero_gaze_head_is_uniform() {
    let cfg = small_cfg();
    let mut p = init_params::<f64>(&cfg, 0).unwrap();
    zero(&mut p, GAZE_HEAD_W2);
    let ex = small_example(&cfg);
    let lq = gaze_logprobs(&cfg, &p, &ex.x).unwrap();
    assert!(lq.data().iter().all(|&v| (v + 9f64.ln()).abs() < 1e-15));
}

#[test]
fn gaze_rows_normalised_at_init() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 7).unwrap();
    let lq = gaze_logprobs(&cfg, &p, &small_example(&cfg).x).unwrap();
    for row in lq.data().chunks(9) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-10);
    }
}

#[test]
fn gaze_logits_are_cell_equivariant() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 2).unwrap();
    let ex = small_example(&cfg);
    let (a, b) = (1usize, 7usize);
    let mut swapped = ex.x.clone();
    let f = cfg.feat;
    for k in 0..f {
        swapped.data_mut().swap(a * f + k, b * f + k);
    }
    let l0 = gaze_logprobs(&cfg, &p, &ex.x).unwrap();
    let l1 = gaze_logprobs(&cfg, &p, &swapped).unwrap();
    let (d0, d1) = (l0.data(), l1.data());
    for (i, v) in d0.iter().enumerate() {
        let j = if i == a { b } else if i == b { a } else { i };
        assert!((v - d1[j]).abs() < 1e-12);
    }
}

#[test]
fn zero_fc_gives_half_attention() {
    let cfg = small_cfg();
    let mut p = init_params::<f64>(&cfg, 0).unwrap();
    zero(&mut p, ATTN_FC_W);
    zero(&mut p, ATTN_FC_B);
    let mut tape = Tape::new();
    let b = tape.bind(&p);
    let z = tape.constant(onehot_tensor(&LatentIndex::from_cells(vec![0, 4], cfg.dims().unwrap()).unwrap(), cfg.dims().unwrap()));
    let a = attention_map(&mut tape, &b, &cfg, z).unwrap();
    assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn relaxed_near_onehot_matches_hard_attention() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 4).unwrap();
    let dims = cfg.dims().unwrap();
    let z = LatentIndex::from_cells(vec![2, 5], dims).unwrap();
    let hard = onehot_tensor::<f64>(&z, dims);
    let soft = hard.map(|v| if v == 1.0 { 1.0 - 1e-9 } else { 1e-9 / 8.0 });
    let mut tape = Tape::new();
    let b = tape.bind(&p);
    let zh = tape.constant(hard);
    let zs = tape.constant(soft);
    let ah = attention_map(&mut tape, &b, &cfg, zh).unwrap();
    let as_ = attention_map(&mut tape, &b, &cfg, zs).unwrap();
    for (x, y) in tape.value(ah).data().iter().zip(tape.value(as_).data()) {
        assert!((x - y).abs() < 1e-6);
        assert!(*x > 0.0 && *x < 1.0);
    }
}

#[test]
fn residual_gating_identities() {
    let mut tape = Tape::<f64>::new();
    let feats = tape.leaf(Tensor::from_f64(vec![3, 2], &[1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap());
    let half = tape.constant(Tensor::full(&[3], 0.5));
    let out = apply_attention(&mut tape, Residual::MultiplicativeResidual, feats, half).unwrap();
    let expect: Vec<f64> = tape.value(feats).data().iter().map(|v| 1.5 * v).collect();
    assert_eq!(tape.value(out).data(), expect.as_slice());
    let zero = tape.constant(Tensor::zeros(&[3]));
    let out0 = apply_attention(&mut tape, Residual::MultiplicativeResidual, feats, zero).unwrap();
    assert_eq!(tape.value(out0).data(), tape.value(feats).data());
    let bad = tape.constant(Tensor::zeros(&[2]));
    assert!(apply_attention(&mut tape, Residual::Additive, feats, bad).is_err());
}

#[test]
fn residual_gradient_is_one_plus_attention() {
    let attn = [0.2, 0.7, 0.9];
    let mut params = ParamSet::new();
    params
        .insert("g", Group::Theta, Tensor::from_f64(vec![3, 2], &[1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap())
        .unwrap();
    let f = |tape: &mut Tape<f64>, b: &crate::diffcore::Bindings| {
        let a = tape.constant(Tensor::from_f64(vec![3], &attn).unwrap());
        let out = apply_attention(tape, Residual::MultiplicativeResidual, b.var("g")?, a)?;
        tape.reduce_sum(out, None)
    };
    let report = finite_difference_check(&params, 1e-5, None, f).unwrap();
    assert!(report.max_rel_error < 1e-8);
    let mut tape = Tape::new();
    let b = tape.bind(&params);
    let out = f(&mut tape, &b).unwrap();
    let g = tape.backward(out, &b).unwrap();
    for (i, v) in g.get("g").unwrap().data().iter().enumerate() {
        assert!((v - (1.0 + attn[i / 2])).abs() < 1e-15);
    }
}

#[test]
fn zero_recognition_head_is_uniform_over_classes() {
    let cfg = small_cfg();
    let mut p = init_params::<f64>(&cfg, 0).unwrap();
    zero(&mut p, REC_HEAD_W2);
    let ex = small_example(&cfg);
    let eval = RecognitionEval::new(&cfg, &p, &ex.x).unwrap();
    let z = LatentIndex::from_cells(vec![1, 1], cfg.dims().unwrap()).unwrap();
    assert!(eval.class_loglik(&z).iter().all(|v| (v + 3f64.ln()).abs() < 1e-15));
}

#[test]
fn fast_evaluator_matches_tape() {
    for residual in [Residual::MultiplicativeResidual, Residual::Additive] {
        for rec_head in [0, 5] {
            let cfg = ModelConfig {
                residual,
                rec_head,
                rec_activation: Activation::Relu,
                ..small_cfg()
            };
            let p = init_params::<f64>(&cfg, 11).unwrap();
            let ex = small_example(&cfg);
            let eval = RecognitionEval::new(&cfg, &p, &ex.x).unwrap();
            let dims = cfg.dims().unwrap();
            for z in [vec![0, 0], vec![3, 8], vec![8, 2]] {
                let z = LatentIndex::from_cells(z, dims).unwrap();
                let mut tape = Tape::new();
                let b = tape.bind_frozen(&p);
                let x = tape.constant(ex.x.clone());
                let zv = tape.constant(onehot_tensor(&z, dims));
                let lp = class_loglik(&mut tape, &b, &cfg, x, Some(zv)).unwrap();
                let fast = eval.class_loglik(&z);
                let total: f64 = fast.iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-10);
                for (a, b) in tape.value(lp).data().iter().zip(&fast) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
            let mut tape = Tape::new();
            let b = tape.bind_frozen(&p);
            let x = tape.constant(ex.x.clone());
            let lp = class_loglik(&mut tape, &b, &cfg, x, None).unwrap();
            for (a, b) in tape.value(lp).data().iter().zip(&eval.class_loglik_plain()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

/// Four classes, one feature channel per class, identity projection and a
/// linear head with identity weights: the pooled vector is the logit vector.
#[test]
fn hand_wired_linear_classifier() {
    let cfg = ModelConfig {
        t: 1,
        h: 1,
        w: 2,
        feat: 4,
        classes: 4,
        rec_features: 4,
        rec_head: 0,
        ..ModelConfig::default()
    };
    let mut p = init_params::<f64>(&cfg, 0).unwrap();
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    p.value_mut(REC_PROJ_W).unwrap().data_mut().copy_from_slice(&eye);
    p.value_mut(REC_HEAD_W2).unwrap().data_mut().copy_from_slice(&eye);
    zero(&mut p, ATTN_FC_W);
    zero(&mut p, ATTN_FC_B);
    let x = Tensor::from_f64(vec![2, 4], &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 0.0, -1.0]).unwrap();
    let eval = RecognitionEval::new(&cfg, &p, &x).unwrap();
    let z = LatentIndex::from_cells(vec![0], cfg.dims().unwrap()).unwrap();
    // attention 0.5 everywhere: pooled = 1.5 * mean of rows
    let logits = [3.0, 0.0, 1.5, -0.75];
    let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
    for (got, l) in eval.class_loglik(&z).iter().zip(logits) {
        assert!((got - (l - lse)).abs() < 1e-14);
    }
}

#[test]
fn f_table_rows_follow_variants() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 5).unwrap();
    let ex = small_example(&cfg);
    let eval = RecognitionEval::new(&cfg, &p, &ex.x).unwrap();
    let base = LatentIndex::from_cells(vec![4, 1], cfg.dims().unwrap()).unwrap();
    let table = eval.f_table(&base, 2).unwrap();
    assert_eq!(table.shape(), &[2, 9]);
    assert_eq!(table.data()[4], eval.class_loglik(&base)[2]);
    assert_eq!(table.data()[9 + 1], eval.class_loglik(&base)[2]);
    assert_eq!(table.data()[9 + 6], eval.class_loglik(&base.with_cell(1, 6))[2]);
    assert!(eval.f_table(&base, 3).is_err());
}

fn fd_settings_check(mode: EstimatorMode, group: Option<Group>) -> f64 {
    let cfg = small_cfg();
    // Nonzero biases keep every ReLU away from its kink: with zero biases a
    // cell whose trunk units are all inactive feeds exactly 0 to the head.
    let mut p = init_params::<f64>(&cfg, 9).unwrap();
    for (i, (_, param)) in p.iter_mut().enumerate() {
        if param.value.shape().len() == 1 {
            for (j, v) in param.value.data_mut().iter_mut().enumerate() {
                *v += 0.05 * (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0 + 0.013;
            }
        }
    }
    let ex = small_example(&cfg);
    let s = settings(mode);
    let streams = NoiseStreams::new(21);
    let report = finite_difference_check(&p, 1e-5, group, |tape, b| {
        let snapshot = b.snapshot(tape)?;
        let mut scratch = Vec::new();
        let g = loss_graph(tape, b, &snapshot, &cfg, &ex, &s, streams, &mut scratch)?;
        Ok(g.value)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn total_loss_passes_finite_differences() {
    assert!(fd_settings_check(EstimatorMode::GumbelSoftmax, None) < 1e-4);
    assert!(fd_settings_check(EstimatorMode::Direct, Some(Group::Theta)) < 1e-4);
    assert!(fd_settings_check(EstimatorMode::GtGaze, None) < 1e-4);
    assert!(fd_settings_check(EstimatorMode::None, None) < 1e-4);
}

#[test]
fn gt_gaze_and_none_leave_phi_untouched() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 9).unwrap();
    let ex = small_example(&cfg);
    for mode in [EstimatorMode::GtGaze, EstimatorMode::None] {
        let out = total_loss(&cfg, &p, &ex, &settings(mode), NoiseStreams::new(0)).unwrap();
        assert!(out.grads.restrict(Group::Phi).all_zero());
        assert_eq!(out.kl, 0.0);
    }
}

#[test]
fn constant_f_gives_zero_phi_gradient_without_kl() {
    let cfg = ModelConfig {
        lambda_kl: 0.0,
        ..small_cfg()
    };
    let mut p = init_params::<f64>(&cfg, 9).unwrap();
    zero(&mut p, REC_HEAD_W2);
    let ex = small_example(&cfg);
    let out = total_loss(&cfg, &p, &ex, &settings(EstimatorMode::Direct), NoiseStreams::new(5)).unwrap();
    assert!(out.grads.restrict(Group::Phi).all_zero());
    assert!((out.loss - 3f64.ln()).abs() < 1e-14);
}

#[test]
fn kl_vanishes_when_q_equals_prior() {
    let cfg = small_cfg();
    let dims = cfg.dims().unwrap();
    let prior = GazePrior::<f64>::uniform(dims);
    let q = GazeDistribution::new(prior.probs().map(|v| v.ln())).unwrap();
    assert!(gaze_kl(&q, &prior, GazeSupervision::ReverseKl).unwrap().abs() < 1e-15);
    assert!(gaze_kl(&q, &prior, GazeSupervision::ForwardCe).unwrap().abs() < 1e-15);
}

#[test]
fn map_prediction_ignores_per_timestep_shifts() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 13).unwrap();
    let ex = small_example(&cfg);
    let lq = gaze_logprobs(&cfg, &p, &ex.x).unwrap();
    let q = GazeDistribution::new(lq.clone()).unwrap();
    let pred = predict(&cfg, &p, &ex, EstimatorMode::Direct, GazeDecode::Map).unwrap();
    assert_eq!(pred.gaze, q.map_index());
    // shifting logits per timestep then renormalising returns the same rows
    let shifted: Vec<f64> = lq.data().iter().enumerate().map(|(i, v)| v + (i / 9) as f64 * 3.0).collect();
    let renorm: Vec<f64> = shifted
        .chunks(9)
        .flat_map(|r| {
            let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            r.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect();
    let q2 = GazeDistribution::<f64>::new(Tensor::from_f64(vec![2, 9], &renorm).unwrap()).unwrap();
    assert_eq!(q2.map_index(), q.map_index());
    let attn = pred.attention.unwrap();
    let (lo, hi, _) = attn.stats();
    assert!(lo > 0.0 && hi < 1.0);
}

#[test]
fn gt_gaze_prediction_uses_annotation() {
    let cfg = small_cfg();
    let p = init_params::<f64>(&cfg, 13).unwrap();
    let ex = small_example(&cfg);
    let pred = predict(&cfg, &p, &ex, EstimatorMode::GtGaze, GazeDecode::Map).unwrap();
    assert_eq!(pred.gaze, ex.gaze_gt);
    let plain = predict(&cfg, &p, &ex, EstimatorMode::None, GazeDecode::Map).unwrap();
    assert!(plain.attention.is_none());
    let sampled = predict(&cfg, &p, &ex, EstimatorMode::Direct, GazeDecode::Sampled(NoiseStreams::new(4))).unwrap();
    assert_eq!(sampled.gaze.len(), cfg.t);
}

#[test]
fn f32_model_runs() {
    let cfg = small_cfg();
    let p = init_params::<f32>(&cfg, 1).unwrap();
    let task = TaskConfig {
        t: 2,
        h: 3,
        w: 3,
        feat: 5,
        classes: 3,
        train_size: 2,
        test_size: 1,
        ..TaskConfig::default()
    };
    let ex = generate_dataset::<f32>(&task).unwrap().train.examples.remove(0);
    let s = LossSettings {
        mode: EstimatorMode::Direct,
        eps: 1.0f32,
        tau: 2.0,
        draws: 1,
    };
    let out = total_loss(&cfg, &p, &ex, &s, NoiseStreams::new(0)).unwrap();
    assert!(out.loss.is_finite());
}

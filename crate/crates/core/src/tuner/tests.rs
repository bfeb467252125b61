#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::tests::toy;
use crate::encoder::{Encoder, FrozenEncoder};
use crate::error::Error;
use crate::hetgraph::HetGraph;
use crate::numerics::{gaussian, ParamStore, Tape, Tensor};
use crate::synth::Split;

fn frozen(g: &HetGraph, dim: usize) -> FrozenEncoder {
    Encoder::init(g, dim, 0.5, &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap()
        .freeze()
}

fn toy_split() -> Split {
    Split {
        labeled: vec![0, 2, 4],
        val: vec![1, 3, 5],
        test: vec![1, 3, 5],
    }
}

fn cfg() -> TuneConfig {
    TuneConfig {
        k: 2,
        patience: 20,
        max_epochs: 60,
        ..TuneConfig::default()
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Scalar evaluation of the tuning objective, one class term at a time.
fn brute_force_loss(
    z: &Tensor,
    q_proj: &Tensor,
    q: &Tensor,
    labeled: &[usize],
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> f64 {
    let mut nce = 0.0;
    for (&v, &y) in labeled.iter().zip(labels) {
        let mut denom = 0.0;
        for c in 0..q_proj.rows() {
            denom += (cos(z.row(v), q_proj.row(c)) / tau).exp();
        }
        let num = (cos(z.row(v), q_proj.row(y)) / tau).exp();
        nce -= (num / denom).ln();
    }
    let mut orth = 0.0;
    for i in 0..q.rows() {
        for j in 0..q.rows() {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            orth += (dot - target).powi(2);
        }
    }
    nce + lambda * orth
}

fn loss_value(
    z: &Tensor,
    q_proj: &Tensor,
    q: &Tensor,
    labeled: &[usize],
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let qp = tape.constant(q_proj.clone());
    let qv = tape.constant(q.clone());
    let l = tuning_loss(&mut tape, zv, qp, qv, labeled, labels, tau, lambda).unwrap();
    tape.value(l).item()
}

#[test]
fn tuning_loss_matches_brute_force_on_hand_instances() {
    let z = Tensor::from_rows(&[vec![1.0, 0.5, -0.2], vec![0.0, 1.0, 0.3], vec![-0.7, 0.1, 0.9]]);
    let qp = Tensor::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.1, 0.8, 0.2], vec![-0.5, 0.0, 1.0]]);
    let q = Tensor::from_rows(&[vec![1.0, 0.2, 0.0], vec![0.0, 0.9, 0.1], vec![0.3, 0.0, 1.1]]);
    for (labeled, labels) in [(vec![0, 2], vec![0, 2]), (vec![1, 0], vec![2, 1])] {
        for (tau, lambda) in [(0.5, 0.01), (1.0, 0.0), (0.1, 3.0)] {
            let got = loss_value(&z, &qp, &q, &labeled, &labels, tau, lambda);
            let want = brute_force_loss(&z, &qp, &q, &labeled, &labels, tau, lambda);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn tuning_loss_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let z = gaussian(&mut rng, 4, 5, 1.0);
        let qp = gaussian(&mut rng, 3, 5, 1.0);
        let q = gaussian(&mut rng, 3, 5, 1.0);
        let labeled = vec![rng.random_range(0..4), rng.random_range(0..4)];
        let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
        let got = loss_value(&z, &qp, &q, &labeled, &labels, 0.5, 0.01);
        let want = brute_force_loss(&z, &qp, &q, &labeled, &labels, 0.5, 0.01);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn equal_similarities_give_log_class_count() {
    // every node token is orthogonal to every class token
    let z = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 2.0]]);
    let q = Tensor::identity(3).select_rows(&[0, 1]);
    let l = loss_value(&z, &q, &q, &[0, 1], &[0, 1], 0.5, 0.01);
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn orthonormal_class_tokens_have_no_penalty() {
    let theta = 0.3f64;
    let q = Tensor::from_rows(&[
        vec![theta.cos(), theta.sin(), 0.0],
        vec![-theta.sin(), theta.cos(), 0.0],
    ]);
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let z = tape.constant(q.clone());
    let with = tuning_loss(&mut tape, z, qv, qv, &[0, 1], &[0, 1], 0.5, 1.0).unwrap();
    let mut tape2 = Tape::new();
    let (qv2, z2) = (tape2.constant(q.clone()), tape2.constant(q));
    let without = tuning_loss(&mut tape2, z2, qv2, qv2, &[0, 1], &[0, 1], 0.5, 0.0).unwrap();
    assert!((tape.value(with).item() - tape2.value(without).item()).abs() < 1e-12);
}

#[test]
fn identity_head_leaves_tokens_unchanged() {
    let g = toy(0);
    let enc = frozen(&g, 4);
    let ctx = TuneContext::new(&g, &enc).unwrap();
    let model = PromptModel::init(&ctx, &[0, 2, 4], &cfg()).unwrap();
    let mut tape = Tape::new();
    let fwd = model.forward(&ctx, &mut tape).unwrap();
    assert_eq!(tape.value(fwd.projected_nodes), tape.value(fwd.node_tokens));
    assert_eq!(tape.value(fwd.projected_classes), model.class_tokens());
}

#[test]
fn shared_head_projects_equal_inputs_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let head = Head {
        w: store.add("W", gaussian(&mut rng, 3, 3, 1.0), true),
        b: store.add("b", gaussian(&mut rng, 1, 3, 1.0), true),
    };
    let x = gaussian(&mut rng, 2, 3, 1.0);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x.clone());
    let pa = project(&mut tape, &store, a, head).unwrap();
    let pb = project(&mut tape, &store, b, head).unwrap();
    assert_eq!(tape.value(pa), tape.value(pb));
    // scalar oracle
    let w = store.value(head.w);
    let bias = store.value(head.b);
    for r in 0..2 {
        for c in 0..3 {
            let want: f64 = (0..3).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>() + bias.get(0, c);
            assert!((tape.value(pa).get(r, c) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn template_rejects_invalid_class() {
    let g = toy(0);
    let enc = frozen(&g, 4);
    let ctx = TuneContext::new(&g, &enc).unwrap();
    let model = PromptModel::init(&ctx, &[0, 2, 4], &cfg()).unwrap();
    let (z, q) = model.template(&ctx, 1, 2).unwrap();
    assert_eq!((z.len(), q.len()), (4, 4));
    assert!(model.template(&ctx, 1, 3).is_err());
    assert!(model.template(&ctx, 6, 0).is_err());
}

#[test]
fn probabilities_match_scalar_softmax() {
    let sim = Tensor::from_rows(&[vec![0.2, -0.4, 0.9], vec![0.5, 0.5, 0.5]]);
    let p = probabilities(&sim, None);
    let e: Vec<f64> = [0.2f64, -0.4, 0.9].iter().map(|s| s.exp()).collect();
    let total: f64 = e.iter().sum();
    for c in 0..3 {
        assert!((p.get(0, c) - e[c] / total).abs() < 1e-15);
        assert!((p.get(1, c) - 1.0 / 3.0).abs() < 1e-15);
    }
    let pt = probabilities(&sim, Some(0.5));
    assert!(pt.get(0, 2) > p.get(0, 2));
}

#[test]
fn exact_tie_predicts_class_zero() {
    let p = probabilities(&Tensor::from_rows(&[vec![0.4, 0.4]]), None);
    assert_eq!(argmax_rows(&p), vec![0]);
}

proptest! {
    #[test]
    fn probability_rows_are_normalized(seed in 0u64..1000) {
        let sim = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), 8, 5, 1.0);
        let p = probabilities(&sim, None);
        for r in 0..8 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn argmax_survives_monotone_transforms(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let sim = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4, 1.0);
        let base = argmax_rows(&probabilities(&sim, None));
        prop_assert_eq!(argmax_rows(&probabilities(&sim.map(|s| s * scale), None)), base.clone());
        prop_assert_eq!(argmax_rows(&sim.map(|s| s.powi(3) + s)), base.clone());
        prop_assert_eq!(argmax_rows(&probabilities(&sim, Some(0.5))), base);
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let g = toy(2);
    let enc = frozen(&g, 3);
    let ctx = TuneContext::new(&g, &enc).unwrap();
    for separate_heads in [false, true] {
        let cfg = TuneConfig {
            separate_heads,
            ..cfg()
        };
        let model = PromptModel::init(&ctx, &[0, 2, 4], &cfg).unwrap();
        let report = model.gradient_check(&ctx, &[0, 2, 4], 1e-4, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        let names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"prompt.Q") && names.contains(&"prompt.F.author") && names.contains(&"agg.fuse.W"));
    }
}

#[test]
fn tuning_lowers_loss_and_keeps_encoder_frozen() {
    let g = toy(3);
    let enc = frozen(&g, 4);
    let before = enc.params_hash();
    let out = tune(&g, &enc, &toy_split(), &cfg()).unwrap();
    assert_eq!(enc.params_hash(), before);
    assert!(out.final_loss() < out.initial_loss());
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn best_snapshot_dominates_earlier_epochs() {
    let g = toy(4);
    let enc = frozen(&g, 4);
    let out = tune(&g, &enc, &toy_split(), &cfg()).unwrap();
    assert_eq!(out.best_val_macro_f1, out.val_macro_f1[out.best_epoch]);
    assert!(out.val_macro_f1[..=out.best_epoch]
        .iter()
        .all(|&v| v <= out.best_val_macro_f1));
    let ctx = TuneContext::new(&g, &enc).unwrap();
    let val = evaluate_model(&out.model, &ctx, &toy_split().val).unwrap();
    assert_eq!(val.macro_f1, out.best_val_macro_f1);
}

#[test]
fn zero_learning_rate_keeps_the_initial_state() {
    let g = toy(5);
    let enc = frozen(&g, 4);
    let c = TuneConfig { lr: 0.0, ..cfg() };
    let out = tune(&g, &enc, &toy_split(), &c).unwrap();
    let ctx = TuneContext::new(&g, &enc).unwrap();
    let init = PromptModel::init(&ctx, &toy_split().labeled, &c).unwrap();
    for (a, b) in out.model.store().iter().zip(init.store().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(out.best_epoch, 0);
    assert_eq!(
        evaluate_model(&out.model, &ctx, &toy_split().test).unwrap(),
        zero_tuning(&g, &enc, &toy_split(), &c).unwrap()
    );
}

#[test]
fn larger_lambda_shrinks_the_orthogonality_gap() {
    let g = toy(6);
    let enc = frozen(&g, 4);
    let ctx = TuneContext::new(&g, &enc).unwrap();
    let gaps: Vec<f64> = [0.01, 1.0, 100.0]
        .iter()
        .map(|&lambda| {
            let c = TuneConfig {
                lambda,
                lr: 5e-3,
                ..cfg()
            };
            let model = PromptModel::init(&ctx, &[0, 2, 4], &c).unwrap();
            let mut tuner = PromptTuner::new(model, &[0, 2, 4], c.lr);
            for _ in 0..3000 {
                tuner.step(&ctx).unwrap();
            }
            tuner.model().orthogonality_gap()
        })
        .collect();
    assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
}

#[test]
fn tuning_is_deterministic() {
    let g = toy(7);
    let enc = frozen(&g, 4);
    let a = tune(&g, &enc, &toy_split(), &cfg()).unwrap();
    let b = tune(&g, &enc, &toy_split(), &cfg()).unwrap();
    assert_eq!(a.losses, b.losses);
    let ctx = TuneContext::new(&g, &enc).unwrap();
    assert_eq!(
        evaluate_model(&a.model, &ctx, &[1, 3, 5]).unwrap(),
        evaluate_model(&b.model, &ctx, &[1, 3, 5]).unwrap()
    );
}

#[test]
fn missing_class_in_labeled_set_is_a_split_error() {
    let g = toy(0);
    let enc = frozen(&g, 4);
    let split = Split {
        labeled: vec![0, 2],
        ..toy_split()
    };
    assert!(matches!(tune(&g, &enc, &split, &cfg()), Err(Error::Split(_))));
    assert!(matches!(finetune(&g, &enc, &split, &cfg()), Err(Error::Split(_))));
}

#[test]
fn out_of_range_settings_are_config_errors() {
    for c in [
        TuneConfig { lr: 0.1, ..cfg() },
        TuneConfig { patience: 5, ..cfg() },
        TuneConfig { tau: 0.0, ..cfg() },
        TuneConfig { k: 0, ..cfg() },
    ] {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let mut c = TuneConfig::default();
    assert_eq!(c.lambda, 0.01);
    assert!(c.apply("lambda", "0.5").unwrap());
    assert!(!c.apply("shots", "5").unwrap());
    assert!(c.apply("tau", "x").is_err());
}

#[test]
fn prompt_checkpoint_round_trips() {
    let g = toy(8);
    let enc = frozen(&g, 4);
    let out = tune(
        &g,
        &enc,
        &toy_split(),
        &TuneConfig {
            separate_heads: true,
            ..cfg()
        },
    )
    .unwrap();
    let ctx = TuneContext::new(&g, &enc).unwrap();
    let text = out.model.to_checkpoint(&ctx).to_text();
    let ck = crate::checkpoint::Checkpoint::from_text(&text, "hetgpt-prompt").unwrap();
    let back = PromptModel::from_checkpoint(&ck, &ctx).unwrap();
    assert_eq!(back.similarities(&ctx).unwrap(), out.model.similarities(&ctx).unwrap());

    let other = frozen(&g, 4).thaw_copy();
    let mut store = other.store().clone();
    let id = store.id_by_name("head.B").unwrap();
    store.value_mut(id).data_mut()[0] += 1.0;
    let mut changed = other;
    *changed.store_mut() = store;
    let changed = changed.freeze();
    let ctx2 = TuneContext::new(&g, &changed).unwrap();
    assert!(matches!(
        PromptModel::from_checkpoint(&ck, &ctx2),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn finetune_with_zero_lr_scores_the_initial_head() {
    let g = toy(9);
    let enc = frozen(&g, 4);
    let c = TuneConfig { lr: 0.0, ..cfg() };
    let a = finetune(&g, &enc, &toy_split(), &c).unwrap();
    assert_eq!(a.best_epoch, 0);
    assert!(a.losses.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(a.trainable_params, finetune_trainable_params(&enc, 3));
    let b = finetune(&g, &enc, &toy_split(), &cfg()).unwrap();
    assert!(b.losses.last().unwrap() < &b.losses[0]);
}

#[test]
fn logistic_baseline_learns_the_labeled_set() {
    let g = toy(10);
    let split = Split {
        labeled: vec![0, 1, 2, 3, 4, 5],
        ..toy_split()
    };
    let out = logistic_regression(
        &g,
        &split,
        &TuneConfig {
            max_epochs: 300,
            patience: 100,
            ..cfg()
        },
    )
    .unwrap();
    assert!(out.losses.last().unwrap() < &out.losses[0]);
    assert_eq!(out.trainable_params, 3 * 3 + 3);
}

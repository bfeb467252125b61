//! Dense matrices, reverse-mode gradients, Adam, and a finite-difference
//! checker.

mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckReport, ParamCheck, Stencil};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Segments, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Negative slope used for every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

use rand::Rng;
use rand_distr::StandardNormal;

/// Zero-mean Gaussian entries with variance `2 / fan_in`.
pub fn kaiming_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches by construction")
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches by construction")
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::{Error, Result};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Checks one primitive: `build` maps parameter vars to an output,
    /// which is contracted against a fixed random weight matrix.
    fn check_primitive<F>(seed: u64, shapes: &[(usize, usize)], build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        check_primitive_h(seed, shapes, 1e-3, Stencil::FivePoint, build)
    }

    fn check_primitive_h<F>(seed: u64, shapes: &[(usize, usize)], h: f64, stencil: Stencil, build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| store.add(format!("p{i}"), gaussian(&mut r, a, b, 1.0), true))
            .collect();
        let mut probe_rng = rng(seed ^ 0xdead_beef);
        let mut probe: Option<Tensor> = None;
        let report = finite_diff_check_with(
            &mut store,
            |s, tape| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
                let out = build(tape, &vars)?;
                let (n, m) = tape.value(out).shape();
                let w = probe
                    .get_or_insert_with(|| {
                        // magnitudes in [0.5, 1.5] keep every adjoint seed away from zero
                        gaussian(&mut probe_rng, n, m, 1.0).map(|g| g.signum() * (0.5 + g.abs().fract()))
                    })
                    .clone();
                let w = tape.constant(w);
                let prod = tape.elementwise_mul(out, w)?;
                tape.sum_all(prod)
            },
            h,
            1e-6,
            stencil,
        )
        .unwrap();
        report.max_rel_error()
    }

    const ROWS: usize = 3;
    const COLS: usize = 5;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn unary_primitives_match_central_differences(seed in 0u64..10_000) {
            let s = [(ROWS, COLS)];
            let cases: Vec<(&str, f64)> = vec![
                ("scale", check_primitive(seed, &s, |t, v| t.scale(v[0], -1.7))),
                ("transpose", check_primitive(seed, &s, |t, v| t.transpose(v[0]))),
                ("row_softmax", check_primitive(seed, &s, |t, v| t.row_softmax(v[0]))),
                ("row_log_softmax", check_primitive(seed, &s, |t, v| t.row_log_softmax(v[0]))),
                ("leaky_relu", check_primitive_h(seed, &s, 1e-5, Stencil::ThreePoint, |t, v| t.leaky_relu(v[0], LEAKY_SLOPE))),
                ("tanh", check_primitive(seed, &s, |t, v| t.tanh(v[0]))),
                ("reduce_mean_rows", check_primitive(seed, &s, |t, v| t.reduce_mean_rows(v[0]))),
                ("sum_all", check_primitive(seed, &s, |t, v| t.sum_all(v[0]))),
                ("l2_normalize_rows", check_primitive(seed, &s, |t, v| t.l2_normalize_rows(v[0]))),
                ("frobenius_norm_sq", check_primitive(seed, &s, |t, v| t.frobenius_norm_sq(v[0]))),
                ("slice_rows", check_primitive(seed, &s, |t, v| t.slice_rows(v[0], 1, 3))),
                ("slice_cols", check_primitive(seed, &s, |t, v| t.slice_cols(v[0], 2, 5))),
                ("gather_rows", check_primitive(seed, &s, |t, v| t.gather_rows(v[0], Arc::from(vec![2, 0, 2, 1])))),
                ("pick", check_primitive(seed, &s, |t, v| t.pick(v[0], Arc::from(vec![(0, 1), (2, 4), (0, 1)])))),
            ];
            for (name, err) in cases {
                prop_assert!(err < 1e-6, "{name}: relative error {err} seed {seed}");
            }
        }

        #[test]
        fn binary_primitives_match_central_differences(seed in 0u64..10_000) {
            let same = [(ROWS, COLS), (ROWS, COLS)];
            let segs = Arc::new(Segments::from_lists(&[vec![0, 4], vec![], vec![1, 2, 3]]));
            let cases: Vec<(&str, f64)> = vec![
                ("matmul", check_primitive(seed, &[(ROWS, COLS), (COLS, 4)], |t, v| t.matmul(v[0], v[1]))),
                ("add", check_primitive(seed, &same, |t, v| t.add(v[0], v[1]))),
                ("sub", check_primitive(seed, &same, |t, v| t.sub(v[0], v[1]))),
                ("elementwise_mul", check_primitive(seed, &same, |t, v| t.elementwise_mul(v[0], v[1]))),
                ("add_row", check_primitive(seed, &[(ROWS, COLS), (1, COLS)], |t, v| t.add_row(v[0], v[1]))),
                ("mul_scalar", check_primitive(seed, &[(ROWS, COLS), (1, 1)], |t, v| t.mul_scalar(v[0], v[1]))),
                ("concat_cols", check_primitive(seed, &[(ROWS, COLS), (ROWS, 2)], |t, v| t.concat_cols(&[v[0], v[1]]))),
                ("concat_rows", check_primitive(seed, &[(ROWS, COLS), (2, COLS)], |t, v| t.concat_rows(&[v[0], v[1]]))),
                ("segment_softmax", check_primitive(seed, &[(COLS, 1)], {
                    let segs = segs.clone();
                    move |t, v| t.segment_softmax(v[0], segs.clone())
                })),
                ("segment_attend", check_primitive(seed, &[(COLS, 1), (ROWS + 2, 4)], {
                    let segs = segs.clone();
                    move |t, v| t.segment_attend(v[0], v[1], segs.clone())
                })),
            ];
            for (name, err) in cases {
                prop_assert!(err < 1e-6, "{name}: relative error {err} seed {seed}");
            }
        }

        #[test]
        fn softmax_rows_are_positive_and_normalized(seed in 0u64..10_000) {
            let mut tape = Tape::new();
            let x = tape.constant(gaussian(&mut rng(seed), ROWS, COLS, 10.0));
            let y = tape.row_softmax(x).unwrap();
            let t = tape.value(y);
            for r in 0..t.rows() {
                let sum: f64 = t.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(t.row(r).iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn normalized_rows_have_unit_norm(seed in 0u64..10_000) {
            let mut x = gaussian(&mut rng(seed), ROWS, COLS, 3.0);
            x.row_mut(1).fill(0.0);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = tape.l2_normalize_rows(xv).unwrap();
            let t = tape.value(y);
            for r in [0, 2] {
                let n: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
            prop_assert!(t.row(1).iter().all(|&v| v == 0.0));
            prop_assert_eq!(tape.zero_rows(y), &[1]);
        }
    }

    /// A chain of five primitives on 3×3 inputs.
    #[test]
    fn composed_graph_matches_central_differences() {
        for seed in 0..20 {
            let err = check_primitive_h(seed, &[(3, 3), (3, 3), (1, 3)], 1e-5, Stencil::ThreePoint, |t, v| {
                let a = t.matmul(v[0], v[1])?;
                let b = t.add_row(a, v[2])?;
                let c = t.tanh(b)?;
                let d = t.row_softmax(c)?;
                t.elementwise_mul(d, v[0])
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let x = gaussian(&mut rng(3), 3, 4, 1.0);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn leaky_relu_value_and_slope() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(-1.0), true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.leaky_relu(x, LEAKY_SLOPE).unwrap();
        assert_eq!(tape.value(y).item(), -0.01);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.01);
    }

    #[test]
    fn linear_map_gradient_broadcasts_input() {
        // out = sum(W·x) ⇒ ∂out/∂W[i][j] = x[j]
        let mut store = ParamStore::new();
        let w = store.add("w", gaussian(&mut rng(1), 4, 3, 1.0), true);
        let x = Tensor::column(&[0.5, -2.0, 3.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        store.accumulate(&tape, &g);
        let grad = &store.get(w).grad;
        for r in 0..4 {
            assert_eq!(grad.row(r), x.data());
        }
    }

    #[test]
    fn frobenius_gradient_is_twice_input() {
        let q = gaussian(&mut rng(2), 3, 4, 1.0);
        let mut store = ParamStore::new();
        let id = store.add("q", q.clone(), true);
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let f = tape.frobenius_norm_sq(v).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(v).unwrap(), &q.map(|x| 2.0 * x));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => assert_eq!((lhs, rhs), ((2, 3), (2, 3))),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), false);
        let u = store.add("u", Tensor::scalar(3.0), true);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let uv = tape.param(&store, u);
        let p = tape.elementwise_mul(wv, uv).unwrap();
        let g = tape.backward(p).unwrap();
        store.accumulate(&tape, &g);
        assert_eq!(store.get(w).grad.item(), 0.0);
        assert_eq!(store.get(u).grad.item(), 2.0);
    }

    #[test]
    fn gradcheck_quadratic_and_constant() {
        let mut store = ParamStore::new();
        let w = store.add("w", gaussian(&mut rng(4), 3, 3, 1.0), true);
        let report = finite_diff_check(
            &mut store,
            |s, t| {
                let v = t.param(s, w);
                let f = t.frobenius_norm_sq(v)?;
                t.scale(f, 0.5)
            },
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());

        let report = finite_diff_check(
            &mut store,
            |s, t| {
                let v = t.param(s, w);
                let z = t.scale(v, 0.0)?;
                let c = t.sum_all(z)?;
                let one = t.constant(Tensor::scalar(1.0));
                t.add(c, one)
            },
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(store.get(w).grad.data().iter().all(|g| g.abs() < 1e-10));
        assert!(report.params[0].numeric.abs() < 1e-10);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut r = rng(9);
            let mut tape = Tape::new();
            let a = tape.constant(gaussian(&mut r, 4, 6, 1.0));
            let b = tape.constant(gaussian(&mut r, 6, 3, 1.0));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.row_softmax(c).unwrap();
            let e = tape.l2_normalize_rows(d).unwrap();
            tape.value(e).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tape_dump_lists_every_record() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 2));
        let b = tape.tanh(a).unwrap();
        let _ = tape.sum_all(b).unwrap();
        let dump = tape.dump();
        assert_eq!(dump.lines().count(), 3);
        assert!(dump.contains("tanh"));
    }
}

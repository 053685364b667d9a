use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    t64(shape, &v)
}

/// Random values with |x| ≥ 0.05 so relu kinks are never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = random(shape, seed);
    for v in t.values_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    t
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn linear_identity_and_affine() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[1.0, 0.0]));
    let w = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t64(&[2], &[0.0, 0.0]));
    assert_eq!(tape.values(tape.linear(x, w, b).unwrap()), vec![1.0, 0.0]);

    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let b = tape.constant(t64(&[1], &[3.0]));
    assert_eq!(tape.values(tape.linear(x, w, b).unwrap()), vec![6.0]);
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3]));
    let w = tape.constant(Tensor::zeros(vec![4, 2]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    match tape.linear(x, w, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let x = random(&[3, 4], 1);
    let b = random(&[2], 2);
    let w = random(&[4, 2], 3);
    let err = grad_check(
        |tape, wv| {
            let xv = tape.constant(x.clone());
            let bv = tape.constant(b.clone());
            Ok(tape.sum(tape.linear(xv, wv, bv)?))
        },
        &w,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    for (which, target) in [(0, &x), (1, &b)] {
        let err = grad_check(
            |tape, v| {
                let (xv, bv) = if which == 0 {
                    (v, tape.constant(b.clone()))
                } else {
                    (tape.constant(x.clone()), v)
                };
                let wv = tape.constant(w.clone());
                let y = tape.linear(xv, wv, bv)?;
                Ok(tape.sum(tape.mul(y, y)?))
            },
            target,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn conv2d_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let k = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = tape.conv2d(x, k, 1).unwrap();
    assert_eq!(tape.shape(y), vec![1, 1, 1, 1]);
    assert_eq!(tape.values(y), vec![4.0]);

    let input = random(&[2, 3, 5, 4], 4);
    let mut kernel = Tensor::zeros(vec![3, 3, 1, 1]);
    for c in 0..3 {
        kernel.values_mut()[c * 3 + c] = 1.0;
    }
    let x = tape.constant(input.clone());
    let k = tape.constant(kernel);
    let y = tape.conv2d(x, k, 1).unwrap();
    assert_eq!(tape.value(y).values(), input.values());
}

#[test]
fn conv2d_output_geometry_and_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 7, 6]));
    let k = tape.constant(Tensor::zeros(vec![2, 1, 3, 2]));
    let y = tape.conv2d(x, k, 2).unwrap();
    assert_eq!(tape.shape(y), vec![1, 2, 3, 3]);
    let big = tape.constant(Tensor::zeros(vec![1, 1, 8, 2]));
    assert!(matches!(tape.conv2d(x, big, 1), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let x = random(&[1, 2, 4, 4], 5);
    let k = random(&[3, 2, 2, 2], 6);
    for stride in [1, 2] {
        let err_x = grad_check(
            |tape, xv| {
                let kv = tape.constant(k.clone());
                let y = tape.conv2d(xv, kv, stride)?;
                Ok(tape.sum(tape.tanh(y)))
            },
            &x,
            1e-3,
        )
        .unwrap();
        let err_k = grad_check(
            |tape, kv| {
                let xv = tape.constant(x.clone());
                let y = tape.conv2d(xv, kv, stride)?;
                Ok(tape.sum(tape.tanh(y)))
            },
            &k,
            1e-3,
        )
        .unwrap();
        assert!(err_x < 1e-4 && err_k < 1e-4, "{err_x} {err_k}");
    }
}

#[test]
fn pad_and_channel_bias_gradients() {
    let x = random(&[2, 2, 3, 3], 7);
    let b = random(&[2], 8);
    let err = grad_check(
        |tape, xv| {
            let p = tape.pad2d(xv, 1)?;
            let k = tape.constant(random(&[1, 2, 3, 3], 9));
            Ok(tape.sum(tape.tanh(tape.conv2d(p, k, 1)?)))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(
        |tape, bv| {
            let xv = tape.constant(x.clone());
            Ok(tape.sum(tape.tanh(tape.channel_bias(xv, bv)?)))
        },
        &b,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn elementwise_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(tape.values(tape.relu(x)), vec![0.0, 0.0, 2.0]);
    let z = tape.constant(t64(&[1], &[0.0]));
    assert_eq!(tape.values(tape.tanh(z)), vec![0.0]);

    let a = random(&[2, 3], 10);
    let tape = Tape::<f64>::new();
    let av = tape.param(&a);
    let bv = tape.constant(random(&[2, 3], 11));
    let s = tape.sum(tape.add(av, bv).unwrap());
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(av).unwrap(), &[1.0; 6]);

    let other = tape.constant(Tensor::zeros(vec![3, 2]));
    assert!(tape.add(av, other).is_err());
    assert!(tape.elementwise(Elementwise::Mul, av, None).is_err());
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.param(&t64(&[3], &[-1.0, 0.0, 1.0]));
    let s = tape.sum(tape.relu(x));
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn elementwise_gradients() {
    let x = away_from_zero(&[3, 4], 12);
    let y = random(&[3, 4], 13);
    for kind in [
        Elementwise::Relu,
        Elementwise::Tanh,
        Elementwise::Add,
        Elementwise::Mul,
        Elementwise::Scale(-2.5),
    ] {
        let err = grad_check(
            |tape, xv| {
                let yv = tape.constant(y.clone());
                let out = tape.elementwise(kind, xv, Some(yv))?;
                let w = tape.constant(y.clone());
                Ok(tape.sum(tape.mul(out, w)?))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 3], &[0.0, 0.0, 0.0]));
    assert_close(&tape.values(tape.softmax(x).unwrap()), &[1.0 / 3.0; 3], 1e-12);
    let x = tape.constant(t64(&[1, 2], &[0.0, 2f64.ln()]));
    assert_close(&tape.values(tape.softmax(x).unwrap()), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
}

#[test]
fn softmax_gradient() {
    let x = random(&[3, 5], 14);
    let w = random(&[3, 5], 15);
    let err = grad_check(
        |tape, xv| {
            let wv = tape.constant(w.clone());
            Ok(tape.sum(tape.mul(tape.softmax(xv)?, wv)?))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batchnorm_normalizes_and_tracks_running_stats() {
    let tape = Tape::<f64>::new();
    // column 0 is already zero-mean unit-variance (biased estimate)
    let x = t64(&[4, 2], &[1.0, 3.0, -1.0, 5.0, 1.0, -2.0, -1.0, 0.5]);
    let xv = tape.constant(x.clone());
    let gamma = tape.constant(Tensor::full(vec![2], 1.0));
    let beta = tape.constant(Tensor::zeros(vec![2]));
    let mut stats = BatchNormStats::new(2);
    let y = tape.value(tape.batchnorm(xv, gamma, beta, &mut stats, Mode::Train).unwrap());
    for i in 0..4 {
        assert!((y.values()[i * 2] - x.values()[i * 2]).abs() < 1e-4);
    }
    // running mean = 0.9·0 + 0.1·batch mean
    assert!((stats.mean[1] - 0.1 * 1.625).abs() < 1e-12);
    assert!(stats.mean[0].abs() < 1e-12);

    let one = tape.constant(Tensor::zeros(vec![1, 2]));
    assert!(matches!(
        tape.batchnorm(one, gamma, beta, &mut stats, Mode::Train),
        Err(Error::BatchSize { got: 1, .. })
    ));
    // infer mode accepts a single row and uses running statistics
    let before = stats.clone();
    let y = tape.batchnorm(one, gamma, beta, &mut stats, Mode::Infer).unwrap();
    assert_eq!(stats, before);
    let expect = (0.0 - stats.mean[1]) / (stats.var[1] + BATCHNORM_EPS).sqrt();
    assert!((tape.values(y)[1] - expect).abs() < 1e-12);
}

#[test]
fn batchnorm_gradients() {
    let x = random(&[4, 3], 16);
    let gamma = random(&[3], 17);
    let beta = random(&[3], 18);
    let w = random(&[4, 3], 19);
    for mode in [Mode::Train, Mode::Infer] {
        let which = [&x, &gamma, &beta];
        for (i, target) in which.iter().enumerate() {
            let err = grad_check(
                |tape, v| {
                    let pick = |j: usize, t: &Tensor<f64>| if i == j { v } else { tape.constant(t.clone()) };
                    let mut stats = BatchNormStats {
                        mean: vec![0.1, -0.2, 0.3],
                        var: vec![0.5, 1.5, 2.0],
                    };
                    let y = tape.batchnorm(pick(0, &x), pick(1, &gamma), pick(2, &beta), &mut stats, mode)?;
                    let wv = tape.constant(w.clone());
                    Ok(tape.sum(tape.mul(y, wv)?))
                },
                target,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "{mode:?} input {i}: {err}");
        }
    }
}

#[test]
fn dropout_contract() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(random(&[4, 4], 20));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.9, Mode::Infer, &mut rng).unwrap(), x);
    assert!(matches!(
        tape.dropout(x, 1.0, Mode::Train, &mut rng),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn dropout_preserves_expectation() {
    // Monte-Carlo oracle: inverted dropout is unbiased.
    let n = 10_000;
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![n], 1.5));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
    let mean = tape.values(y).iter().sum::<f64>() / n as f64;
    assert!((mean - 1.5).abs() / 1.5 < 0.02, "{mean}");
    let zeros = tape.values(y).iter().filter(|&&v| v == 0.0).count();
    assert!((zeros as f64 / n as f64 - 0.3).abs() < 0.02);
}

#[test]
fn dropout_gradient_uses_same_mask() {
    let x = random(&[3, 3], 21);
    let err = grad_check(
        |tape, xv| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let y = tape.dropout(xv, 0.5, Mode::Train, &mut rng)?;
            Ok(tape.sum(tape.mul(y, y)?))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn l2_normalize_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3, 2], &[3.0, 4.0, 0.6, 0.8, 0.0, 0.0]));
    let y = tape.values(tape.l2_normalize(x).unwrap());
    assert_close(&y, &[0.6, 0.8, 0.6, 0.8, 0.0, 0.0], 1e-12);
}

#[test]
fn l2_normalize_gradient() {
    let x = random(&[3, 4], 22);
    let w = random(&[3, 4], 23);
    let err = grad_check(
        |tape, xv| {
            let wv = tape.constant(w.clone());
            Ok(tape.sum(tape.mul(tape.l2_normalize(xv)?, wv)?))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn concat_examples_and_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.param(&t64(&[1, 1], &[1.0]));
    let b = tape.param(&t64(&[1, 1], &[2.0]));
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.values(c), vec![1.0, 2.0]);
    assert_eq!(tape.concat(&[a]).unwrap(), a);
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), &[1.0]);
    assert_eq!(g.get(b).unwrap(), &[1.0]);

    let tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros(vec![2, 1]));
    let q = tape.constant(Tensor::zeros(vec![3, 1]));
    assert!(tape.concat(&[p, q]).is_err());

    let x = random(&[2, 3], 24);
    let other = random(&[2, 2], 25);
    let err = grad_check(
        |tape, xv| {
            let o = tape.constant(other.clone());
            let c = tape.concat(&[o, xv])?;
            Ok(tape.sum(tape.tanh(c)))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn sequence_ops_gradients() {
    let x = random(&[5, 3], 26);
    let lengths = [2, 3];
    let w = random(&[2, 3], 27);
    let err = grad_check(
        |tape, xv| {
            let wv = tape.constant(w.clone());
            Ok(tape.sum(tape.mul(tape.segment_mean(xv, &lengths)?, wv)?))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let scores = random(&[5, 1], 28);
    let err = grad_check(
        |tape, sv| {
            let a = tape.segment_softmax(sv, &lengths)?;
            let h = tape.constant(x.clone());
            let pooled = tape.segment_weighted_sum(h, a, &lengths)?;
            let wv = tape.constant(w.clone());
            Ok(tape.sum(tape.mul(pooled, wv)?))
        },
        &scores,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let err = grad_check(
        |tape, hv| {
            let a = tape.constant(random(&[5, 1], 29));
            let pooled = tape.segment_weighted_sum(hv, a, &lengths)?;
            Ok(tape.sum(tape.tanh(pooled)))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    assert!(matches!(tape.segment_mean(xv, &[5, 0]), Err(Error::EmptySequence(_))));
    assert!(tape.segment_mean(xv, &[2, 2]).is_err());
}

#[test]
fn conv_to_seq_roundtrip_gradient() {
    let x = random(&[2, 3, 4, 2], 30);
    let w = random(&[8, 6], 31);
    let tape = Tape::<f64>::new();
    let seq = tape.conv_to_seq(tape.constant(x.clone())).unwrap();
    assert_eq!(tape.shape(seq), vec![8, 6]);
    // sample 1, channel 2, time 3, width 1 → row 1·4+3, column 2·2+1
    let v = tape.values(seq)[(4 + 3) * 6 + 2 * 2 + 1];
    assert_eq!(v, x.values()[((3 + 2) * 4 + 3) * 2 + 1]);
    let err = grad_check(
        |tape, xv| {
            let s = tape.conv_to_seq(xv)?;
            let wv = tape.constant(w.clone());
            Ok(tape.sum(tape.mul(s, wv)?))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn arc_margin_and_cross_entropy_gradients() {
    let cos = {
        let mut c = random(&[3, 4], 32);
        c.values_mut().iter_mut().for_each(|v| *v *= 0.9);
        c
    };
    let labels = [1, 0, 3];
    let err = grad_check(
        |tape, cv| {
            let z = tape.arc_margin(cv, &labels, 4.0, 0.3)?;
            tape.cross_entropy(z, &labels)
        },
        &cos,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(
        tape.cross_entropy(z, &[0, 3]),
        Err(Error::Label { label: 3, classes: 3 })
    ));
}

#[test]
fn backward_simple_functionals() {
    let x = random(&[2, 3], 33);
    let tape = Tape::<f64>::new();
    let xv = tape.param(&x);
    let s = tape.sum(xv);
    assert_eq!(tape.backward(s).unwrap().get(xv).unwrap(), &[1.0; 6]);

    let tape = Tape::<f64>::new();
    let xv = tape.param(&x);
    let s = tape.sum(tape.mul(xv, xv).unwrap());
    let g = tape.backward(s).unwrap();
    let expect: Vec<f64> = x.values().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(xv).unwrap(), expect.as_slice());
}

#[test]
fn backward_rejects_non_scalar_and_double_use() {
    let tape = Tape::<f64>::new();
    let xv = tape.param(&random(&[2], 34));
    assert!(matches!(tape.backward(xv), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(xv);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::TapeFrozen)));
    tape.reset();
    assert!(tape.is_empty());
    let xv = tape.param(&random(&[2], 34));
    let s = tape.sum(xv);
    assert!(tape.backward(s).is_ok());
}

#[test]
fn fan_out_accumulates_branch_gradients() {
    // f(x) = Σ tanh(x) + Σ x·c  versus the same sum split into two tapes.
    let x = random(&[4], 35);
    let c = random(&[4], 36);
    let tape = Tape::<f64>::new();
    let xv = tape.param(&x);
    let cv = tape.constant(c.clone());
    let branch_a = tape.sum(tape.tanh(xv));
    let branch_b = tape.sum(tape.mul(xv, cv).unwrap());
    let total = tape.add(branch_a, branch_b).unwrap();
    let fused = tape.backward(total).unwrap().get(xv).unwrap().to_vec();

    let mut separate = vec![0.0; 4];
    for branch in 0..2 {
        let tape = Tape::<f64>::new();
        let xv = tape.param(&x);
        let out = if branch == 0 {
            tape.sum(tape.tanh(xv))
        } else {
            let cv = tape.constant(c.clone());
            tape.sum(tape.mul(xv, cv).unwrap())
        };
        let g = tape.backward(out).unwrap();
        for (s, v) in separate.iter_mut().zip(g.get(xv).unwrap()) {
            *s += v;
        }
    }
    assert_close(&fused, &separate, 1e-15);
}

#[test]
fn gradients_accumulate_into_tensor_buffer() {
    let mut x = random(&[3], 37).with_grad();
    for _ in 0..2 {
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        tape.backward(s).unwrap().accumulate_into(xv, &mut x);
    }
    assert_eq!(x.grad().unwrap(), &[2.0; 3]);
    x.zero_grad();
    assert_eq!(x.grad().unwrap(), &[0.0; 3]);
}

#[test]
fn grad_check_trivial_cases() {
    let x = random(&[5], 38);
    assert!(grad_check(|tape, v| Ok(tape.sum(v)), &x, 1e-3).unwrap() < 1e-9);
    let x = away_from_zero(&[5], 39);
    assert!(grad_check(|tape, v| Ok(tape.sum(tape.relu(v))), &x, 1e-3).unwrap() < 1e-6);
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let x = tape.constant(random(&[2, 1, 6, 5], 40).cast());
        let k = tape.param(&random(&[3, 1, 3, 3], 41).cast());
        let y = tape.conv2d(x, k, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = tape.dropout(y, 0.25, Mode::Train, &mut rng).unwrap();
        let s = tape.sum(tape.tanh(y));
        let g = tape.backward(s).unwrap();
        (tape.values(s), g.get(k).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_tape_tracks_f64_tape() {
    let x = random(&[2, 3], 42);
    let w = random(&[3, 2], 43);
    let run64 = {
        let tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&w);
        let s = tape.sum(tape.tanh(tape.matmul(xv, wv).unwrap()));
        tape.backward(s).unwrap().get(wv).unwrap().to_vec()
    };
    let run32 = {
        let tape = Tape::<f32>::new();
        let xv = tape.constant(x.cast());
        let wv = tape.param(&w.cast());
        let s = tape.sum(tape.tanh(tape.matmul(xv, wv).unwrap()));
        tape.backward(s).unwrap().get(wv).unwrap().to_vec()
    };
    for (a, b) in run64.iter().zip(&run32) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

#[test]
fn matmul_gradients() {
    let a = random(&[3, 4], 44);
    let b = random(&[4, 2], 45);
    let bt = random(&[5, 4], 46);
    let e1 = grad_check(
        |tape, av| {
            let bv = tape.constant(b.clone());
            Ok(tape.sum(tape.tanh(tape.matmul(av, bv)?)))
        },
        &a,
        1e-3,
    )
    .unwrap();
    let e2 = grad_check(
        |tape, bv| {
            let av = tape.constant(a.clone());
            Ok(tape.sum(tape.tanh(tape.matmul_t(av, bv)?)))
        },
        &bt,
        1e-3,
    )
    .unwrap();
    assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        values in prop::collection::vec(-20.0f64..20.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3, 4], &values));
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let xs = tape.constant(t64(&[3, 4], &shifted));
        let y = tape.values(tape.softmax(x).unwrap());
        let ys = tape.values(tape.softmax(xs).unwrap());
        for row in y.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (a, b) in y.iter().zip(&ys) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized(seed in 0u64..1000, rows in 8usize..20) {
        let x = random(&[rows, 3], seed);
        let tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let gamma = tape.constant(Tensor::full(vec![3], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![3]));
        let mut stats = BatchNormStats::new(3);
        let y = tape.values(tape.batchnorm(xv, gamma, beta, &mut stats, Mode::Train).unwrap());
        for j in 0..3 {
            let col: Vec<f64> = (0..rows).map(|i| y[i * 3 + j]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn differentiable_ops_pass_gradient_check(seed in 0u64..10_000) {
        let x = away_from_zero(&[2, 3], seed);
        let w = random(&[3, 3], seed + 1);
        let err = grad_check(
            |tape, xv| {
                let wv = tape.constant(w.clone());
                let b = tape.constant(Tensor::zeros(vec![3]));
                let h = tape.relu(xv);
                let z = tape.linear(h, wv, b)?;
                let n = tape.l2_normalize(tape.tanh(z))?;
                let s = tape.softmax(n)?;
                Ok(tape.sum(tape.mul(s, tape.concat(&[xv])?)?))
            },
            &x,
            1e-4,
        ).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }
}

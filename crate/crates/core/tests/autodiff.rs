use dcim_core::autodiff::{Tape, Var};
use dcim_core::nn::ParamStore;
use dcim_core::verify::{check_gradients, project, suite, GradCheckOptions};
use dcim_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_zero() {
    let tape = Tape::<f64>::new();
    let x = rand_tensor(&[3, 4], 1);
    let i = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert!(tape.value(y).bit_eq(&x));

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let y = tape.matmul(a, z).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_tensor(&[4, 5], 2);
    let b = rand_tensor(&[5, 3], 3);
    let mut oracle = [[0.0f64; 3]; 4];
    for (i, row) in oracle.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for k in 0..5 {
                *cell += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let tape = Tape::<f64>::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let y = tape.detach(tape.matmul(va, vb).unwrap());
    for i in 0..4 {
        for j in 0..3 {
            assert!((y.at(&[i, j]) - oracle[i][j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let y = tape.detach(tape.softmax(x, 0).unwrap());
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.detach(tape.softmax(x, 0).unwrap());
    assert_eq!(y.data(), &[1.0, 0.0]);
}

/// Compensated-summation oracle: `p_i = 1 / Σ_j exp(x_j - x_i)`.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for &xj in x {
                let v = (xj - xi).exp();
                let tsum = s + v;
                c += if s.abs() >= v.abs() { (s - tsum) + v } else { (v - tsum) + s };
                s = tsum;
            }
            1.0 / (s + c)
        })
        .collect()
}

#[test]
fn softmax_matches_compensated_oracle() {
    let x = rand_tensor(&[7], 4).map(|v| v * 6.0);
    let tape = Tape::<f64>::new();
    let y = tape.detach(tape.softmax(tape.constant(x.clone()), 0).unwrap());
    for (a, b) in y.data().iter().zip(softmax_oracle(x.data())) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn softmax_over_inner_axis() {
    let x = rand_tensor(&[3, 4, 2], 5);
    let tape = Tape::<f64>::new();
    let y = tape.detach(tape.softmax(tape.constant(x), 1).unwrap());
    for a in 0..3 {
        for c in 0..2 {
            let s: f64 = (0..4).map(|b| y.at(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&[3, 4], 6));
    let y = tape.detach(tape.masked_softmax(x, &[true, false, true, false]).unwrap());
    for r in 0..3 {
        assert_eq!(y.at(&[r, 1]), 0.0);
        assert_eq!(y.at(&[r, 3]), 0.0);
        assert!((y.at(&[r, 0]) + y.at(&[r, 2]) - 1.0).abs() < 1e-12);
    }
    let y = tape.detach(tape.masked_softmax(x, &[false; 4]).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

fn layer_norm_of(x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let d = x.last_dim();
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::ones(&[d]));
    let b = tape.constant(Tensor::zeros(&[d]));
    tape.detach(tape.layer_norm(xv, g, b, eps).unwrap())
}

#[test]
fn layer_norm_examples() {
    let y = layer_norm_of(&Tensor::full(&[4], 3.0), 1e-5);
    assert!(y.data().iter().all(|&v| v == 0.0));

    let eps = 1e-5;
    let y = layer_norm_of(&t(&[2], &[1.0, -1.0]), eps);
    let expect = 1.0 / (1.0f64 + eps).sqrt();
    assert!((y.data()[0] - expect).abs() < 1e-15);
    assert!((y.data()[1] + expect).abs() < 1e-15);

    let x = rand_tensor(&[5], 7);
    let y = layer_norm_of(&x, eps);
    let mean = x.data().iter().sum::<f64>() / 5.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    for (a, &xi) in y.data().iter().zip(x.data()) {
        assert!((a - (xi - mean) / (var + eps).sqrt()).abs() <= 1e-10);
    }
    let ymean = y.data().iter().sum::<f64>() / 5.0;
    let yvar = y.data().iter().map(|v| (v - ymean).powi(2)).sum::<f64>() / 5.0;
    assert!(ymean.abs() < 1e-6 && (yvar - 1.0).abs() < 1e-4);
}

#[test]
fn glu_and_delta_kernel() {
    let tape = Tape::<f64>::new();
    let x = t(&[1, 4], &[0.5, -2.0, 0.3, -0.7]);
    let y = tape.detach(tape.glu(tape.constant(x)).unwrap());
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    assert_eq!(y.shape(), &[1, 2]);
    assert!((y.data()[0] - 0.5 * sig(0.3)).abs() < 1e-15);
    assert!((y.data()[1] + 2.0 * sig(-0.7)).abs() < 1e-15);

    let x = rand_tensor(&[6, 2], 8);
    let w = t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let y = tape.conv1d_depthwise(
        tape.constant(x.clone()),
        tape.constant(w),
        tape.constant(Tensor::zeros(&[2])),
        1,
    );
    assert!(tape.value(y.unwrap()).bit_eq(&x));
}

#[test]
fn backward_examples_and_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(rand_tensor(&[2, 3], 9));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(tape.backward(loss).is_err(), "second backward must be rejected");

    let tape = Tape::<f64>::new();
    let xv = rand_tensor(&[4], 10);
    let x = tape.leaf(xv.clone());
    let sq = tape.mul(x, x).unwrap();
    let g = tape.backward(tape.sum(sq)).unwrap();
    for (a, b) in g.get(x).unwrap().data().iter().zip(xv.data()) {
        assert_eq!(*a, 2.0 * b);
    }

    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(tape.backward(c).is_err(), "detached loss");
}

#[test]
fn dropout_rate_and_modes() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1000]));
    assert!(tape.dropout(x, 1.0).is_err());
    assert!(tape.dropout(x, -0.1).is_err());
    assert_eq!(tape.dropout(x, 0.5).unwrap(), x, "eval mode is a no-op");

    let tape = Tape::<f64>::training(3);
    let x = tape.constant(Tensor::ones(&[4000]));
    let y = tape.detach(tape.dropout(x, 0.25).unwrap());
    let mean = y.sum() / 4000.0;
    assert!((mean - 1.0).abs() < 0.05);
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
}

#[test]
fn every_primitive_passes_finite_differences() {
    let store = ParamStore::new();
    let mut failures = Vec::new();
    for (name, inputs, f) in suite::primitive_cases() {
        let report = check_gradients(name, &store, &inputs, GradCheckOptions::primitive(), f).unwrap();
        if !report.passed() {
            failures.push(report.to_string());
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn dropout_gradient_uses_the_forward_mask() {
    let tape = Tape::<f64>::training(11);
    let x = tape.leaf(rand_tensor(&[50], 12));
    let y = tape.dropout(x, 0.3).unwrap();
    let yv = tape.detach(y);
    let g = tape.backward(tape.sum(y)).unwrap();
    for (gv, v) in g.get(x).unwrap().data().iter().zip(yv.data()) {
        assert_eq!(*gv == 0.0, *v == 0.0);
    }
}

#[test]
fn rel_shift_indexing() {
    // Row i of the output picks relative distances i-j from the
    // descending [T-1 .. -(T-1)] layout.
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn(&[3, 5], |i| i as f64);
    let y = tape.detach(tape.rel_shift(tape.constant(x.clone())).unwrap());
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(y.at(&[i, j]), x.at(&[i, 2 - i + j]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_accumulation_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x0 = rand_tensor(&[3, 4], seed);
        let w = rand_tensor(&[4, 2], seed + 1);
        let l1 = |tape: &Tape<f64>, x: Var| {
            let y = tape.matmul(x, tape.constant(w.clone())).unwrap();
            tape.sum(tape.swish(y))
        };
        let l2 = |tape: &Tape<f64>, x: Var| {
            let y = tape.softmax(x, 1).unwrap();
            project(tape, y, 7).unwrap()
        };
        let grad = |f: &dyn Fn(&Tape<f64>, Var) -> Var| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l = f(&tape, x);
            tape.backward(l).unwrap().get(x).unwrap().clone()
        };
        let g1 = grad(&l1);
        let g2 = grad(&l2);
        let combined = grad(&|tape, x| {
            let (u, v) = (l1(tape, x), l2(tape, x));
            let u = tape.scale(u, a);
            let v = tape.scale(v, b);
            tape.add(u, v).unwrap()
        });
        for i in 0..combined.numel() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9) {
        let x = rand_tensor(&[rows, cols], seed).map(|v| v * 20.0);
        let tape = Tape::<f64>::new();
        let y = tape.detach(tape.softmax(tape.constant(x), 1).unwrap());
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let tape = Tape::<f64>::training(seed);
            let x = tape.constant(rand_tensor(&[4, 6], seed));
            let y = tape.dropout(x, 0.2).unwrap();
            let y = tape.glu(y).unwrap();
            tape.detach(tape.softmax(y, 1).unwrap())
        };
        prop_assert!(run().bit_eq(&run()));
    }
}

// SPDX-License-Identifier: Apache-2.0

use fusepath_autodiff::fdcheck::suite::{self, rand_tensor};
use fusepath_autodiff::rng::stream;
use fusepath_autodiff::{ConvSpec, Graph, ModelParameters, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let cases = suite::primitive_cases(5);
    assert_eq!(cases.len(), suite::PRIMITIVES.len() * 5);
    for c in &cases {
        let r = c.check().unwrap();
        assert!(r.passed(), "{}: {r:?}", c.name);
        assert!(r.checked > 0);
    }
}

#[test]
fn unknown_primitive_has_no_case() {
    assert!(suite::primitive("not_an_op", 0).is_none());
}

#[test]
fn sum_gradient_is_ones_and_accumulates() {
    let mut g = Graph::<f64>::new();
    let w = g.variable(Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap());
    let loss = g.sum(w).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut p = ModelParameters::<f64>::new();
    p.insert("used", Tensor::full(&[2], 1.0));
    p.insert("unused", Tensor::full(&[2], 1.0));
    let mut g = Graph::new();
    let u = g.param(&p, "used").unwrap();
    let l = g.sum(u).unwrap();
    g.backward(l).unwrap();
    g.accumulate_param_grads(&mut p);
    assert_eq!(p.get("unused").unwrap().grad.as_deref(), Some(&[0.0, 0.0][..]));
    assert_eq!(p.get("used").unwrap().grad.as_deref(), Some(&[1.0, 1.0][..]));
}

#[test]
fn fan_out_sums_partials() {
    // y = x*2 + x*x  ->  dy/dx = 2 + 2x
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(&[1, 2], vec![1.5, -0.5]).unwrap());
    let a = g.scale(x, 2.0).unwrap();
    let b = g.mul(x, x).unwrap();
    let y = g.add(a, b).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2, 2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[17.0, 39.0]);

    let eye = g.constant(
        Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
    );
    let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![7.0, 8.0]]).unwrap();
    let xv = g.constant(x.clone());
    let y = g.matmul(eye, xv).unwrap();
    assert_eq!(g.value(y), &x);
    assert!(g.matmul(a, xv).is_err());
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 100], (0..100).map(|i| i as f64).collect()).unwrap());
    let w = g.constant(Tensor::full(&[4, 1, 3], 0.1));
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.conv1d(x, w, b, ConvSpec::same(3, 1)).unwrap();
    assert_eq!(g.shape(y), &[4, 100]);

    let w1 = g.constant(Tensor::full(&[1, 1, 1], 1.0));
    let b1 = g.constant(Tensor::zeros(&[1]));
    let id = g.conv1d(x, w1, b1, ConvSpec::strided(1)).unwrap();
    assert_eq!(g.value(id), g.value(x));

    let short = g.constant(Tensor::zeros(&[1, 2]));
    assert!(g.conv1d(short, w, b, ConvSpec::strided(1)).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0; 4]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
    let x = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1].abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 4]));
    let l = g.cross_entropy(z, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let z = g.constant(Tensor::from_rows(&[vec![0.0, 1e6, 0.0]]).unwrap());
    let l = g.cross_entropy(z, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-6);
    assert!(g.cross_entropy(z, &[3]).is_err());

    // analytic gradient (softmax - onehot) / B
    let rows = vec![vec![0.2, -1.0, 0.5], vec![1.5, 0.0, -0.3]];
    let labels = [2, 0];
    let mut g = Graph::<f64>::new();
    let z = g.variable(Tensor::from_rows(&rows).unwrap());
    let l = g.cross_entropy(z, &labels).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..3 {
            let want = (e[j] / s - if j == labels[i] { 1.0 } else { 0.0 }) / 2.0;
            assert!((grad[i * 3 + j] - want).abs() < 1e-8);
        }
    }
}

#[test]
fn relu_and_layer_norm_statistics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![-1.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);

    let mut r = stream(3, "ln");
    let x = g.constant(rand_tensor(&mut r, &[4, 7]));
    let ones = g.constant(Tensor::full(&[7], 1.0));
    let zeros = g.constant(Tensor::zeros(&[7]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    for i in 0..4 {
        let row = g.value(y).row(i);
        let m: f64 = row.iter().sum::<f64>() / 7.0;
        let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 7.0;
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-5);
    }
}

#[test]
fn eval_batch_norm_is_batch_independent() {
    let mean = [0.5, -0.25];
    let var = [2.0, 0.5];
    let run = |cols: Vec<f64>, n: usize| {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, n], cols).unwrap());
        let ga = g.constant(Tensor::new(&[2], vec![1.5, 0.5]).unwrap());
        let be = g.constant(Tensor::new(&[2], vec![0.1, 0.2]).unwrap());
        let y = g.batch_norm_1d_eval(x, ga, be, &mean, &var, 1e-5).unwrap();
        g.value(y).clone()
    };
    let alone = run(vec![1.0, 2.0], 1);
    let batch = run(vec![1.0, 9.0, 2.0, -4.0], 2);
    assert_eq!(alone.data()[0], batch.data()[0]);
    assert_eq!(alone.data()[1], batch.data()[2]);
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 1], vec![f64::MAX]).unwrap());
    assert!(g.scale(x, 10.0).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
            let y = g.softmax_rows(x).unwrap();
            for i in 0..3 {
                let row = g.value(y).row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn cross_entropy_is_non_negative(vals in prop::collection::vec(-30.0f64..30.0, 6), l0 in 0usize..3, l1 in 0usize..3) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(&[2, 3], vals).unwrap());
            let l = g.cross_entropy(x, &[l0, l1]).unwrap();
            prop_assert!(g.value(l).item() >= 0.0);
        }

        #[test]
        fn conv_length_formula(l in 1usize..200, k in 1usize..6, s in 1usize..4, d in 1usize..4, p in 0usize..4) {
            let spec = ConvSpec { stride: s, dilation: d, padding: p };
            let span = d * (k - 1) + 1;
            match spec.output_len(l, k) {
                Some(n) => prop_assert_eq!(n, (l + 2 * p - span) / s + 1),
                None => prop_assert!(l + 2 * p < span),
            }
        }
    }
}

use gliomaseg::tensor::{Activation, BatchNormConfig, BatchNormState, Graph, Mode, Padding, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -0.25]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let expected: Vec<f64> = g.value(x).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(x).unwrap().data(), expected.as_slice());

    // A second backward accumulates; zero_grad resets.
    g.backward(s).unwrap();
    let doubled: Vec<f64> = expected.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(x).unwrap().data(), doubled.as_slice());
    g.zero_grad();
    assert!(g.grad(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn conv_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, None, 1, Padding::uniform(1)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(g.value(y).data()[4], 9.0);
    assert_eq!(g.value(y).data()[0], 4.0);

    let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
    let y = g.conv2d(x, k, None, 2, Padding::uniform(1)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
}

#[test]
fn conv_is_linear_and_shape_preserving() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
    let alpha = 2.5;
    let mut g = Graph::new();
    let (xv, xs, kv) = (g.input(x.clone()), g.input(x.map(|v| alpha * v)), g.input(k));
    let y = g.conv2d(xv, kv, None, 1, Padding::uniform(1)).unwrap();
    let ys = g.conv2d(xs, kv, None, 1, Padding::uniform(1)).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 8, 8]);
    for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
        assert!(close(alpha * a, *b, 1e-12 * b.abs().max(1.0)));
    }
    let half = g.conv2d(xv, kv, None, 2, Padding::uniform(1)).unwrap();
    assert_eq!(g.value(half).shape(), &[2, 4, 4, 4]);
}

/// Σ R ⊙ conv2d(x, k), evaluated without recording gradients.
fn projected_conv(x: &Tensor, k: &Tensor, r: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (x, k) = (g.input(x.clone()), g.input(k.clone()));
    let y = g.conv2d(x, k, None, 1, Padding::uniform(1)).unwrap();
    g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
    let r = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);

    let mut g = Graph::new();
    let (xv, kv, rv) = (g.param(x.clone()), g.param(k.clone()), g.input(r.clone()));
    let y = g.conv2d(xv, kv, None, 1, Padding::uniform(1)).unwrap();
    let p = g.mul(y, rv).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();

    let h = 1e-5;
    let check = |analytic: &Tensor, perturb: &dyn Fn(usize, f64) -> f64| {
        for i in (0..analytic.len()).step_by(7) {
            let numeric = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-4, "element {i}: analytic {a} numeric {numeric}");
        }
    };
    check(g.grad(xv).unwrap(), &|i, d| {
        let mut x2 = x.clone();
        x2.data_mut()[i] += d;
        projected_conv(&x2, &k, &r)
    });
    check(g.grad(kv).unwrap(), &|i, d| {
        let mut k2 = k.clone();
        k2.data_mut()[i] += d;
        projected_conv(&x, &k2, &r)
    });
}

#[test]
fn upsample_replicates_and_routes_gradients() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.upsample2x(x).unwrap();
    #[rustfmt::skip]
    let expected = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(y).data(), &expected);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0; 4]);
}

#[test]
fn batch_norm_identity_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = Tensor::randn(&[4, 2, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let gamma = g.param(Tensor::full(&[2], 1.0));
    let beta = g.param(Tensor::zeros(&[2]));

    let mut eval_state = BatchNormState::new(vec![0.0; 2], vec![1.0; 2]);
    let y = g
        .batch_norm(x, gamma, beta, &mut eval_state, Mode::Eval, BatchNormConfig::default())
        .unwrap();
    for (a, b) in g.value(y).data().iter().zip(input.data()) {
        assert!(close(*a, *b, 1e-5 * b.abs()));
    }

    let mut train_state = BatchNormState::new(vec![0.0; 2], vec![1.0; 2]);
    let y = g
        .batch_norm(
            x,
            gamma,
            beta,
            &mut train_state,
            Mode::Train,
            BatchNormConfig::default(),
        )
        .unwrap();
    let out = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| out[(b * 2 + c) * 25..(b * 2 + c + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(close(mean, 0.0, 1e-6), "channel {c} mean {mean}");
        assert!(close(var, 1.0, 1e-4), "channel {c} variance {var}");
    }
}

#[test]
fn prelu_and_activation_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 1, 2], &[-2.0, 3.0]));
    let a = g.param(t(&[1], &[0.25]));
    let y = g.prelu(x, a).unwrap();
    assert_eq!(g.value(y).data(), &[-0.5, 3.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[-2.0]);

    let mut g = Graph::new();
    let z = g.param(t(&[2], &[0.0, -3.0]));
    let sig = g.activation(z, Activation::Sigmoid);
    let relu = g.activation(z, Activation::Relu);
    assert_eq!(g.value(sig).data()[0], 0.5);
    assert_eq!(g.value(relu).data()[1], 0.0);
    let s = g.sum(sig);
    g.backward(s).unwrap();
    assert_eq!(g.grad(z).unwrap().data()[0], 0.25);
}

#[test]
fn softmax_is_stable_and_normalized() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4, 1, 2], &[0.0, 1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let p = g.softmax_channels(x).unwrap();
    let d = g.value(p).data();
    // Channel-major: pixel 0 is logits (0, 0, 0, 0), pixel 1 is (1000, 0, 0, 0).
    assert_eq!([d[0], d[2], d[4], d[6]], [0.25; 4]);
    assert!(d.iter().all(|v| v.is_finite()));
    assert!(close(d[1], 1.0, 1e-12) && d[3] < 1e-300 && d[5] < 1e-300 && d[7] < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = g.input(Tensor::randn(&[2, 4, 3, 3], 4.0, &mut rng));
    let p = g.softmax_channels(x).unwrap();
    let d = g.value(p).data();
    for b in 0..2 {
        for px in 0..9 {
            let total: f64 = (0..4).map(|c| d[(b * 4 + c) * 9 + px]).sum();
            assert!(close(total, 1.0, 1e-6));
            assert!((0..4).all(|c| d[(b * 4 + c) * 9 + px] > 0.0 && d[(b * 4 + c) * 9 + px] < 1.0));
        }
    }
}

#[test]
fn pooling_and_dense_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2, 2, 2], &[5.0, 5.0, 5.0, 5.0, 1.0, 3.0, 5.0, 7.0]));
    let pooled = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(pooled).data(), &[5.0, 4.0]);
    let s = g.sum(pooled);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25; 8]);

    let mut g = Graph::new();
    let input = g.input(t(&[1, 2], &[3.0, -1.0]));
    let eye = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = g.param(Tensor::zeros(&[2, 2]));
    let no_bias = g.param(Tensor::zeros(&[2]));
    let bias = g.param(t(&[2], &[0.5, 2.0]));
    let y = g.dense(input, eye, no_bias).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    let y = g.dense(input, zero, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 2.0]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let k = g.param(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng));
        let y = g.conv2d(x, k, None, 1, Padding::uniform(1)).unwrap();
        let p = g.softmax_channels(y).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        (g.value(p).clone(), g.grad(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

use super::*;
use crate::loss::{one_hot, overall_loss_node, LossConfig};

fn small(variant: Variant, width: usize) -> NetworkSpec {
    NetworkSpec {
        se_reduction: 4,
        ..NetworkSpec::with_width(width, variant)
    }
}

fn input(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(&[b, 4, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Closed-form parameter count, written without the layer enumeration.
fn count_oracle(spec: &NetworkSpec) -> usize {
    let plain = spec.variant == Variant::PlainUnet;
    let residual = |cin: usize, cout: usize| {
        let convs = 9 * cin * cout + 9 * cout * cout;
        let bn = 4 * cout;
        let slopes = if plain { 0 } else { 2 * cout };
        let shortcut = if !plain && cin != cout { cin * cout + cout } else { 0 };
        convs + bn + slopes + shortcut
    };
    let dk = if plain { 4 } else { 9 };
    let f = spec.base_width;
    let mut total = 0;
    let mut cin = spec.in_channels;
    for l in 0..spec.depth {
        let w = f << l;
        total += residual(cin, w) + dk * w * 2 * w + 2 * w;
        cin = 2 * w;
    }
    total += residual(cin, cin);
    for l in 0..spec.depth {
        let w = f << l;
        total += 4 * 2 * w * w + w;
        if spec.variant.has_attention() {
            let c = 2 * w;
            let hdn = (c / spec.se_reduction).max(4);
            total += c * hdn + hdn + hdn * c + c;
        }
        total += residual(2 * w, w);
    }
    total + f * spec.num_classes + spec.num_classes
}

#[test]
fn output_shape_and_simplex_on_160_by_192() {
    let spec = small(Variant::MinorModsPlusAttention, 4);
    let params = build(&spec, 1).unwrap();
    let x = input(1, 160, 192, 2);
    let p = predict(&params, &spec, &x).unwrap();
    assert_eq!(p.shape(), &[1, 4, 160, 192]);
    let plane = 160 * 192;
    for i in 0..plane {
        let s: f64 = (0..4).map(|c| p.data()[c * plane + i]).sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let spec = small(Variant::MinorModsPlusAttention, 4);
    let params = build(&spec, 3).unwrap();
    let x = input(2, 16, 24, 4);
    let a = predict(&params, &spec, &x).unwrap();
    let b = predict(&params, &spec, &x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert_eq!(build(&spec, 3).unwrap(), params);
}

#[test]
fn attention_adds_parameters() {
    for width in [4, 8, 16] {
        let with = build(&small(Variant::MinorModsPlusAttention, width), 0).unwrap();
        let without = build(&small(Variant::MinorMods, width), 0).unwrap();
        assert!(with.num_parameters() > without.num_parameters());
    }
}

#[test]
fn parameter_count_matches_shape_walk() {
    for variant in [Variant::PlainUnet, Variant::MinorMods, Variant::MinorModsPlusAttention] {
        let spec = small(variant, 8);
        assert_eq!(
            build(&spec, 0).unwrap().num_parameters(),
            count_oracle(&spec),
            "{variant:?}"
        );
    }
    let wide = NetworkSpec::default();
    assert_eq!(build(&wide, 0).unwrap().num_parameters(), count_oracle(&wide));
}

#[test]
fn se_blocks_only_in_attention_variant() {
    let names = |v| {
        layer_enumeration(&small(v, 4))
            .into_iter()
            .filter(|e| e.name.contains(".se.fc1.weight"))
            .count()
    };
    assert_eq!(names(Variant::MinorMods), 0);
    assert_eq!(names(Variant::PlainUnet), 0);
    assert_eq!(names(Variant::MinorModsPlusAttention), 3);
}

#[test]
fn zero_se_weights_halve_the_input() {
    let mut g = Graph::new();
    let x = Tensor::randn(&[2, 6, 3, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let xv = g.input(x.clone());
    let w = SeWeights {
        fc1_weight: g.input(Tensor::zeros(&[6, 4])),
        fc1_bias: g.input(Tensor::zeros(&[4])),
        fc2_weight: g.input(Tensor::zeros(&[4, 6])),
        fc2_bias: g.input(Tensor::zeros(&[6])),
    };
    let y = se_block(&mut g, xv, &w).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn se_output_channels_are_scaled_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let x = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng).map(|v| v + 3.0);
    let xv = g.input(x.clone());
    let w = SeWeights {
        fc1_weight: g.input(Tensor::randn(&[8, 4], 1.0, &mut rng)),
        fc1_bias: g.input(Tensor::randn(&[4], 1.0, &mut rng)),
        fc2_weight: g.input(Tensor::randn(&[4, 8], 1.0, &mut rng)),
        fc2_bias: g.input(Tensor::randn(&[8], 1.0, &mut rng)),
    };
    let y = se_block(&mut g, xv, &w).unwrap();
    for c in 0..8 {
        let xs = &x.data()[c * 16..(c + 1) * 16];
        let ys = &g.value(y).data()[c * 16..(c + 1) * 16];
        let s = ys[0] / xs[0];
        assert!(s > 0.0 && s < 1.0);
        for (a, b) in ys.iter().zip(xs) {
            assert!((a - s * b).abs() < 1e-12);
        }
    }
}

#[test]
fn non_divisible_input_rejected() {
    let spec = small(Variant::MinorMods, 4);
    let params = build(&spec, 0).unwrap();
    assert!(predict(&params, &spec, &input(1, 12, 16, 0)).is_err());
    assert!(predict(&params, &spec, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in [Variant::MinorModsPlusAttention, Variant::PlainUnet] {
        let spec = small(variant, 4);
        let params = build(&spec, 5).unwrap();
        let x = input(2, 16, 16, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let classes: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.gen_range(0..4)).collect();
        let truth = one_hot(&classes, 2, 4, 16, 16).unwrap();
        let mut g = Graph::new();
        let pass = forward_graph(&mut g, &params, &spec, &x, Mode::Train, true, Some(&mut rng)).unwrap();
        let loss = overall_loss_node(&mut g, pass.probabilities, &truth, &LossConfig::default()).unwrap();
        g.backward(loss).unwrap();
        let grads = pass.gradients(&g);
        assert_eq!(grads.len(), params.trainable().count());
        for (name, grad) in grads {
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "{variant:?}: {name} has zero gradient"
            );
        }
    }
}

#[test]
fn train_mode_updates_running_stats() {
    let spec = small(Variant::MinorMods, 4);
    let mut params = build(&spec, 0).unwrap();
    let before = params.get("enc0.bn1.running_mean").unwrap().clone();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pass = forward_graph(
        &mut g,
        &params,
        &spec,
        &input(2, 8, 8, 1),
        Mode::Train,
        false,
        Some(&mut rng),
    )
    .unwrap();
    assert_eq!(pass.bn_updates.len(), 2 * (2 * spec.depth + 1));
    apply_bn_updates(&mut params, pass.bn_updates).unwrap();
    assert_ne!(params.get("enc0.bn1.running_mean").unwrap(), &before);
    params.validate(&spec).unwrap();
}

#[test]
fn train_mode_requires_noise_source() {
    let spec = small(Variant::MinorMods, 4);
    let params = build(&spec, 0).unwrap();
    assert!(forward(&params, &spec, &input(1, 8, 8, 0), Mode::Train, None).is_err());
}

#[test]
fn invalid_specs_rejected() {
    for spec in [
        NetworkSpec {
            base_width: 0,
            ..NetworkSpec::default()
        },
        NetworkSpec {
            num_classes: 1,
            ..NetworkSpec::default()
        },
        NetworkSpec {
            depth: 0,
            ..NetworkSpec::default()
        },
        NetworkSpec {
            input_noise_sigma: -1.0,
            ..NetworkSpec::default()
        },
    ] {
        assert!(matches!(build(&spec, 0), Err(Error::InvalidSpec(_))));
    }
}

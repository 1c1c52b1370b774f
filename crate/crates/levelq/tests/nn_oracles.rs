//! Forward/backward oracles: the f64 scalar reference pass, central finite
//! differences, the softmax-CE bias identity, and training behavior.

mod common;

use common::*;
use levelq::data::Dataset;
use levelq::network::Network;
use levelq::train::{train, LrSchedule, TrainConfig};

#[test]
fn forward_matches_scalar_reference_on_mlp() {
    let net = mlp3(42);
    let batch = seeded_batch(&[6], 16, 7);
    let labels = seeded_labels(16, 3, 7);
    let (loss, _) = net.forward(&batch, &labels).unwrap();
    let expect = ref_loss(&net, &batch, &labels, None);
    assert!(
        (loss - expect).abs() < 1e-5,
        "implementation {loss} vs reference {expect}"
    );
}

#[test]
fn forward_matches_scalar_reference_on_conv_nets() {
    for (name, net) in [
        ("conv", conv_net(3)),
        ("residual", residual_net(4)),
        ("strided", strided_conv_net(5)),
    ] {
        let batch = seeded_batch(net.input_shape.as_slice(), 6, 11);
        let labels = seeded_labels(6, 3, 11);
        let (loss, _) = net.forward(&batch, &labels).unwrap();
        let expect = ref_loss(&net, &batch, &labels, None);
        assert!(
            (loss - expect).abs() < 1e-5,
            "{name}: implementation {loss} vs reference {expect}"
        );
    }
}

fn check_gradients(name: &str, net: &Network, batch_seed: u64) {
    let batch = seeded_batch(net.input_shape.as_slice(), 5, batch_seed);
    let labels = seeded_labels(5, net.num_classes(), batch_seed);
    // A perturbation of 1e-3 shifts activations by a few 1e-3 at most; the
    // fixture must keep relu/maxpool decisions an order of magnitude away
    // from flipping or central differences measure the kink, not the slope.
    let margin = kink_margin(net, &batch);
    assert!(margin > 1e-2, "{name}: fixture too close to a kink (margin {margin:.4})");
    let grads = net.backward(&batch, &labels).unwrap();
    let eps = 1e-3;
    for li in net.weighted_indices() {
        let g = grads.per_layer[li].as_ref().unwrap();
        for (bias, tensor) in [(false, &g.weights), (true, &g.bias)] {
            for idx in 0..tensor.len() {
                let analytic = tensor.data[idx] as f64;
                let fd = fd_gradient(net, &batch, &labels, li, bias, idx, eps);
                let err = rel_err(analytic, fd);
                assert!(
                    err < 1e-2,
                    "{name} layer {li} {} [{idx}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {err:.3e})",
                    if bias { "bias" } else { "weight" }
                );
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_dense() {
    check_gradients("mlp", &mlp3(0), 109);
}

#[test]
fn gradients_match_finite_differences_conv_pool() {
    check_gradients("conv", &conv_net(67), 102);
}

#[test]
fn gradients_match_finite_differences_residual() {
    check_gradients("residual", &residual_net(72), 118);
}

#[test]
fn gradients_match_finite_differences_strided() {
    check_gradients("strided", &strided_conv_net(10), 106);
}

#[test]
fn final_bias_gradient_is_mean_softmax_minus_onehot() {
    let net = mlp3(9);
    let n = 12;
    let batch = seeded_batch(&[6], n, 31);
    let labels = seeded_labels(n, 3, 31);
    let grads = net.backward(&batch, &labels).unwrap();
    let probs = net.predict(&batch).unwrap();

    // Expected bias gradient of the logit layer, accumulated in f64.
    let classes = 3;
    let mut expect = vec![0.0f64; classes];
    for s in 0..n {
        for c in 0..classes {
            let p = probs.data[s * classes + c] as f64;
            let y = if labels[s] == c { 1.0 } else { 0.0 };
            expect[c] += (p - y) / n as f64;
        }
    }
    let bias_grad = &grads.per_layer[4].as_ref().unwrap().bias;
    for c in 0..classes {
        assert!(
            (bias_grad.data[c] as f64 - expect[c]).abs() < 1e-6,
            "class {c}: {} vs {}",
            bias_grad.data[c],
            expect[c]
        );
    }
}

#[test]
fn training_trajectory_is_deterministic() {
    let ds = separable_dataset(60, 5);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 8,
        epochs_per_iteration: 4,
        lr_schedule: LrSchedule::Constant,
    };
    let run = |seed: u64| -> Vec<u32> {
        let mut net = mlp3(77);
        train(&mut net, &ds, &cfg, seed).unwrap();
        net.layers[0]
            .params()
            .unwrap()
            .0
            .data
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

/// Two linearly separable classes in a 6-dimensional cube.
fn separable_dataset(n: usize, seed: u64) -> Dataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 6);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let offset = if class == 0 { -1.0f32 } else { 1.0 };
        for d in 0..6 {
            let jitter: f32 = rng.gen_range(-0.4..0.4);
            data.push(offset * (0.5 + 0.1 * d as f32) + jitter);
        }
        labels.push(class);
    }
    Dataset::new(vec![6], data, labels).unwrap()
}

#[test]
fn training_separates_a_separable_set() {
    let ds = separable_dataset(80, 3);
    let mut net = mlp3(1);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 16,
        epochs_per_iteration: 200,
        lr_schedule: LrSchedule::Constant,
    };
    train(&mut net, &ds, &cfg, 2).unwrap();
    let (batch, labels) = ds.head_batch(ds.len());
    let (_, acc) = net.forward(&batch, &labels).unwrap();
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn masked_weights_survive_training_bit_identical() {
    let ds = separable_dataset(40, 9);
    let mut net = mlp3(55);
    for li in net.weighted_indices() {
        randomize_mask(&mut net, li, 123 + li as u64);
    }
    let frozen_before: Vec<(usize, usize, u32)> = net
        .weighted_indices()
        .iter()
        .flat_map(|&li| {
            let (w, _, m) = net.layers[li].params().unwrap();
            m.bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 0)
                .map(|(i, _)| (li, i, w.data[i].to_bits()))
                .collect::<Vec<_>>()
        })
        .collect();
    assert!(!frozen_before.is_empty());

    let cfg = TrainConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 1e-3,
        batch_size: 8,
        epochs_per_iteration: 10,
        lr_schedule: LrSchedule::Constant,
    };
    train(&mut net, &ds, &cfg, 4).unwrap();

    for (li, i, bits) in frozen_before {
        let (w, _, _) = net.layers[li].params().unwrap();
        assert_eq!(w.data[i].to_bits(), bits, "layer {li} weight {i} drifted");
    }
}

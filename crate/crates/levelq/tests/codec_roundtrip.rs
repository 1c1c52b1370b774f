//! Codec behavior: bit-exact roundtrips, a hand-assembled golden stream,
//! malformed-input rejection and a decode fuzz harness.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use levelq::clustering::Codebook;
use levelq::codec::{compression_ratio_for_counts, crc32, decode_model, encode_model};
use levelq::error::LqError;
use levelq::layer::{DenseLayer, Layer};
use levelq::network::Network;
use levelq::quantizer::{LayerQuant, QuantState};
use levelq::tensor::{Mask, Tensor};

/// Builds a synthetic fully-quantized model: every weight sits on a centroid
/// of a shared-size codebook and every mask bit is zero.
fn random_quantized_model(rng: &mut ChaCha8Rng) -> (Network, QuantState, u32) {
    let (k, bits) = *[(3usize, 2u32), (5, 3), (9, 4), (17, 5)]
        .iter()
        .nth(rng.gen_range(0..4))
        .unwrap();
    let layer_count = rng.gen_range(1..4usize);
    let mut layers: Vec<Layer> = Vec::new();
    let mut state = QuantState::new(k);
    let mut features = rng.gen_range(2..6usize);
    let input = features;

    for l in 0..layer_count {
        let out_features = if l + 1 == layer_count { 3 } else { rng.gen_range(2..6usize) };
        let n = features * out_features;

        // Sorted distinct centroids; sometimes include an exact zero.
        let mut centroids: Vec<f32> = Vec::new();
        let include_zero = rng.gen_bool(0.7);
        while centroids.len() < k {
            let c = (rng.gen_range(-8i32..8) as f32) / 4.0 + rng.gen_range(0..2) as f32 * 0.0625;
            if c != 0.0 && !centroids.contains(&c) {
                centroids.push(c);
            }
        }
        if include_zero {
            centroids[k / 2] = 0.0;
        }
        centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        centroids.dedup();
        while centroids.len() < k {
            let next = centroids.last().unwrap() + 0.5;
            centroids.push(next);
        }

        let assignment: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k) as u32).collect();
        let weights: Vec<f32> = assignment.iter().map(|&a| centroids[a as usize]).collect();

        layers.push(Layer::Dense(DenseLayer {
            in_features: features,
            out_features,
            weights: Tensor::new(vec![out_features, features], weights).unwrap(),
            bias: Tensor::zeros(vec![out_features]),
            mask: Mask { shape: vec![out_features, features], bits: vec![0; n] },
            codebook: None,
        }));
        state.layers.insert(
            layers.len() - 1,
            LayerQuant {
                codebook: Codebook::new(centroids, vec![true; k]).unwrap(),
                assignment,
            },
        );
        features = out_features;
    }
    layers.push(Layer::SoftmaxLoss);
    (Network::new(vec![input], layers).unwrap(), state, bits)
}

#[test]
fn roundtrip_bit_identity_on_randomized_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let (net, state, bits) = random_quantized_model(&mut rng);
        let bytes = encode_model(&net, &state, bits).unwrap();
        let decoded = decode_model(&bytes).unwrap();
        assert_eq!(decoded.bits, bits);

        let weighted = net.weighted_indices();
        assert_eq!(decoded.layers.len(), weighted.len());
        for (dl, &li) in decoded.layers.iter().zip(&weighted) {
            let (w, _, _) = net.layers[li].params().unwrap();
            let orig: Vec<u32> = w.data.iter().map(|v| v.to_bits()).collect();
            let back: Vec<u32> = dl.weights.iter().map(|v| v.to_bits()).collect();
            assert_eq!(orig, back, "trial {trial}: layer {li} not bit-identical");
        }
        // Deterministic bytes.
        assert_eq!(bytes, encode_model(&net, &state, bits).unwrap());
    }
}

#[test]
fn encode_rejects_unquantized_models() {
    let net = common::mlp3(5);
    let state = QuantState::new(17);
    assert!(matches!(encode_model(&net, &state, 5), Err(LqError::State(_))));
}

/// Hand-assembled expected byte stream for a one-layer model, following the
/// documented layout. Catches any silent format drift.
#[test]
fn golden_byte_stream() {
    let centroids = vec![-0.5f32, 0.0, 0.5];
    let assignment = vec![2u32, 1, 0, 2, 1, 0, 1, 2];
    let weights: Vec<f32> = assignment.iter().map(|&a| centroids[a as usize]).collect();
    let net = Network::new(
        vec![4],
        vec![
            Layer::Dense(DenseLayer {
                in_features: 4,
                out_features: 2,
                weights: Tensor::new(vec![2, 4], weights).unwrap(),
                bias: Tensor::zeros(vec![2]),
                mask: Mask { shape: vec![2, 4], bits: vec![0; 8] },
                codebook: None,
            }),
            Layer::SoftmaxLoss,
        ],
    )
    .unwrap();
    let mut state = QuantState::new(3);
    state.layers.insert(
        0,
        LayerQuant {
            codebook: Codebook::new(centroids, vec![true; 3]).unwrap(),
            assignment,
        },
    );

    let mut expect: Vec<u8> = Vec::new();
    expect.extend_from_slice(b"LQEM");
    expect.push(1); // version
    expect.push(2); // bits
    expect.push(0); // global flags: all layers have a zero centroid
    expect.push(0);
    expect.extend_from_slice(&1u32.to_le_bytes()); // layer count
    expect.extend_from_slice(&8u32.to_le_bytes()); // weights
    expect.extend_from_slice(&2u16.to_le_bytes()); // non-zero centroids
    expect.push(1); // layer flags: has zero
    expect.push(0);
    expect.extend_from_slice(&(-0.5f32).to_le_bytes());
    expect.extend_from_slice(&0.5f32.to_le_bytes());
    // Codewords: centroid -0.5 -> 1, 0.0 -> 0, 0.5 -> 2.
    // Weight order 0.5,0,-0.5,0.5,0,-0.5,0,0.5 -> 2,0,1,2,0,1,0,2.
    // LSB-first 2-bit packing: (2,0,1,2) -> 0b10_01_00_10, (0,1,0,2) -> 0b10_00_01_00.
    expect.push(0b1001_0010);
    expect.push(0b1000_0100);
    let crc = crc32(&expect);
    expect.extend_from_slice(&crc.to_le_bytes());

    let got = encode_model(&net, &state, 2).unwrap();
    assert_eq!(got, expect);
    // Index payload for 8 weights at b=2 is exactly 2 bytes (offsets 20..22).
    assert_eq!(got.len(), 4 + 4 + 4 + 8 + 2 + 4);
}

#[test]
fn malformed_streams_are_format_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (net, state, bits) = random_quantized_model(&mut rng);
    let bytes = encode_model(&net, &state, bits).unwrap();

    // Truncations at every prefix length.
    for cut in 0..bytes.len() {
        match decode_model(&bytes[..cut]) {
            Err(LqError::Format { .. }) => {}
            other => panic!("truncation at {cut} gave {other:?}"),
        }
    }
    // Any single flipped bit fails the checksum (or a later validation).
    for i in (0..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(decode_model(&bad).is_err(), "flip at {i} was accepted");
    }
    // Bad magic specifically.
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_model(&bad), Err(LqError::Format { .. })));
}

#[test]
fn compression_ratio_on_alexnet_shaped_table() {
    // Layer weight counts shaped like the classic 8-layer AlexNet.
    let alexnet: [usize; 8] = [
        34_848, 307_200, 884_736, 663_552, 442_368, 37_748_736, 16_777_216, 4_096_000,
    ];
    let excl = compression_ratio_for_counts(&alexnet, 5, false).unwrap();
    assert!((excl - 6.4).abs() < 1e-12);
    let incl = compression_ratio_for_counts(&alexnet, 5, true).unwrap();
    assert!(incl < excl);
    assert_eq!(incl.round() as i64, 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Arbitrary bytes never panic the decoder.
    #[test]
    fn fuzz_decode_random_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..600)) {
        let _ = decode_model(&bytes);
    }

    /// Mutations of a valid stream never panic either; they decode or error.
    #[test]
    fn fuzz_decode_mutated_valid_stream(seed in 0u64..50, idx in 0usize..200, val in any::<u8>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, state, bits) = random_quantized_model(&mut rng);
        let mut bytes = encode_model(&net, &state, bits).unwrap();
        let n = bytes.len();
        bytes[idx % n] = val;
        let _ = decode_model(&bytes);
    }
}

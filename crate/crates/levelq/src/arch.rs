//! Reference architectures buildable by name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LqError, Result};
use crate::layer::{ConvLayer, DenseLayer, Layer};
use crate::network::Network;

/// Names accepted by [`by_name`].
pub const ARCH_NAMES: &[&str] = &["light-cnn", "mlp", "resnet20-lite"];

/// The light CNN layout used throughout: three 3x3 conv layers (32, 32, 64
/// filters) each followed by relu and 2x2 max pooling, then fully connected
/// 64 -> 32 -> classes.
pub const LIGHT_CNN_FILTERS: [usize; 3] = [32, 32, 64];
pub const LIGHT_CNN_FC: [usize; 2] = [64, 32];

/// Builds a named architecture with seeded He initialization.
pub fn by_name(name: &str, input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
    match name {
        "light-cnn" => light_cnn(input_shape, classes, seed),
        "mlp" => mlp(input_shape, classes, seed),
        "resnet20-lite" => resnet20_lite(input_shape, classes, seed),
        other => Err(LqError::argument(format!(
            "unknown architecture '{other}' (expected one of {ARCH_NAMES:?})"
        ))),
    }
}

fn expect_image(input_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match input_shape {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(LqError::config(format!("expected [C, H, W] input, got {other:?}"))),
    }
}

pub fn light_cnn(input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
    let (c, mut h, mut w) = expect_image(input_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut in_ch = c;
    for &filters in &LIGHT_CNN_FILTERS {
        layers.push(Layer::Conv2d(ConvLayer::new(in_ch, filters, 3, 1, 1, &mut rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
        in_ch = filters;
        h = (h - 2) / 2 + 1;
        w = (w - 2) / 2 + 1;
    }
    let mut features = in_ch * h * w;
    for &units in &LIGHT_CNN_FC {
        layers.push(Layer::Dense(DenseLayer::new(features, units, &mut rng)));
        layers.push(Layer::Relu);
        features = units;
    }
    layers.push(Layer::Dense(DenseLayer::new(features, classes, &mut rng)));
    layers.push(Layer::SoftmaxLoss);
    Network::new(input_shape.to_vec(), layers)
}

pub fn mlp(input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features: usize = input_shape.iter().product();
    if features == 0 {
        return Err(LqError::config("mlp needs a non-empty input shape"));
    }
    let mut layers = Vec::new();
    for units in [128usize, 64] {
        layers.push(Layer::Dense(DenseLayer::new(features, units, &mut rng)));
        layers.push(Layer::Relu);
        features = units;
    }
    layers.push(Layer::Dense(DenseLayer::new(features, classes, &mut rng)));
    layers.push(Layer::SoftmaxLoss);
    Network::new(input_shape.to_vec(), layers)
}

/// Reduced-depth residual stand-in for CIFAR ResNet20: identity-skip blocks
/// at widths 16/32/64 with max-pool downsampling. Not the published
/// architecture (no batch norm, fewer blocks, pooled shortcuts).
pub fn resnet20_lite(input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
    let (c, mut h, mut w) = expect_image(input_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer> = Vec::new();

    let push = |layers: &mut Vec<Layer>, l: Layer| -> usize {
        layers.push(l);
        layers.len() - 1
    };

    let mut in_ch = c;
    for (stage, &width) in [16usize, 32, 64].iter().enumerate() {
        if stage > 0 {
            push(&mut layers, Layer::MaxPool { size: 2, stride: 2 });
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
        push(&mut layers, Layer::Conv2d(ConvLayer::new(in_ch, width, 3, 1, 1, &mut rng)));
        let mut block_in = push(&mut layers, Layer::Relu);
        for _ in 0..2 {
            push(&mut layers, Layer::Conv2d(ConvLayer::new(width, width, 3, 1, 1, &mut rng)));
            push(&mut layers, Layer::Relu);
            push(&mut layers, Layer::Conv2d(ConvLayer::new(width, width, 3, 1, 1, &mut rng)));
            push(&mut layers, Layer::Add { from: block_in });
            block_in = push(&mut layers, Layer::Relu);
        }
        in_ch = width;
    }
    // Global pooling down to 1x1, then the classifier.
    push(&mut layers, Layer::MaxPool { size: h.min(w), stride: h.min(w) });
    push(&mut layers, Layer::Dense(DenseLayer::new(in_ch, classes, &mut rng)));
    push(&mut layers, Layer::SoftmaxLoss);
    Network::new(input_shape.to_vec(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn light_cnn_shapes_chain() {
        let net = light_cnn(&[3, 32, 32], 10, 0).unwrap();
        assert_eq!(net.num_classes(), 10);
        assert_eq!(net.weighted_indices().len(), 6);
        // conv32 + conv32 + conv64 + fc64 + fc32 + fc10 weight counts.
        assert_eq!(net.num_weights(), 864 + 9216 + 18432 + 65536 + 2048 + 320);
    }

    #[test]
    fn resnet_lite_builds_and_runs() {
        let net = resnet20_lite(&[3, 32, 32], 10, 3).unwrap();
        let (batch, labels) = crate::data::synth::generate(4, 1, 5).0.head_batch(4);
        let (loss, _) = net.forward(&batch, &labels).unwrap();
        assert!(loss.is_finite());
        assert!(net.weighted_indices().len() > 10);
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!(by_name("vgg", &[3, 32, 32], 10, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = by_name("mlp", &[8], 4, 9).unwrap();
        let b = by_name("mlp", &[8], 4, 9).unwrap();
        let wa = a.layers[0].params().unwrap().0;
        let wb = b.layers[0].params().unwrap().0;
        assert_eq!(wa.data, wb.data);
    }
}

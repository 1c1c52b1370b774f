//! Shared test oracles: a scalar f64 reference forward pass, independent of
//! the library's vectorized implementation, plus small seeded fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use levelq::layer::{ConvLayer, DenseLayer, Layer};
use levelq::network::Network;
use levelq::tensor::{Mask, Tensor};

/// Additive tweak of one parameter, applied inside the reference pass.
#[derive(Clone, Copy)]
pub struct Perturb {
    pub layer: usize,
    pub bias: bool,
    pub index: usize,
    pub delta: f64,
}

fn weight(net: &Network, li: usize, bias: bool, idx: usize, perturb: Option<Perturb>) -> f64 {
    let (w, b, _) = net.layers[li].params().expect("weighted layer");
    let mut v = if bias { b.data[idx] as f64 } else { w.data[idx] as f64 };
    if let Some(p) = perturb {
        if p.layer == li && p.bias == bias && p.index == idx {
            v += p.delta;
        }
    }
    v
}

fn ref_sample_logits(
    net: &Network,
    x: &[f32],
    in_shape: &[usize],
    perturb: Option<Perturb>,
) -> Vec<f64> {
    let mut margin = f64::INFINITY;
    ref_sample_logits_margin(net, x, in_shape, perturb, &mut margin)
}

/// Reference pass that also tracks the smallest distance to a relu or
/// maxpool decision boundary. Finite differences are only trustworthy on
/// instances whose margin comfortably exceeds the FD step.
fn ref_sample_logits_margin(
    net: &Network,
    x: &[f32],
    in_shape: &[usize],
    perturb: Option<Perturb>,
    margin: &mut f64,
) -> Vec<f64> {
    let mut acts: Vec<Vec<f64>> = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut cur_shape = in_shape.to_vec();

    for (li, layer) in net.layers.iter().enumerate() {
        let (out, out_shape): (Vec<f64>, Vec<usize>) = match layer {
            Layer::Conv2d(c) => {
                let (h, w) = (cur_shape[1], cur_shape[2]);
                let (k, s, p) = (c.kernel, c.stride, c.padding);
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (w + 2 * p - k) / s + 1;
                let mut out = vec![0.0f64; c.out_ch * oh * ow];
                for oc in 0..c.out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = weight(net, li, true, oc, perturb);
                            for ic in 0..c.in_ch {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let widx = ((oc * c.in_ch + ic) * k + ky) * k + kx;
                                        acc += weight(net, li, false, widx, perturb)
                                            * cur[(ic * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            out[(oc * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                (out, vec![c.out_ch, oh, ow])
            }
            Layer::Dense(d) => {
                let mut out = vec![0.0f64; d.out_features];
                for o in 0..d.out_features {
                    let mut acc = weight(net, li, true, o, perturb);
                    for i in 0..d.in_features {
                        acc += weight(net, li, false, o * d.in_features + i, perturb) * cur[i];
                    }
                    out[o] = acc;
                }
                (out, vec![d.out_features])
            }
            Layer::Relu => {
                for &v in &cur {
                    *margin = margin.min(v.abs());
                }
                (cur.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), cur_shape.clone())
            }
            Layer::MaxPool { size, stride } => {
                let (c, h, w) = (cur_shape[0], cur_shape[1], cur_shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (w - size) / stride + 1;
                let mut out = vec![0.0f64; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let v = cur[(ch * h + oy * stride + dy) * w + ox * stride + dx];
                                    if v > m {
                                        second = m;
                                        m = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            if second.is_finite() {
                                *margin = margin.min(m - second);
                            }
                            out[(ch * oh + oy) * ow + ox] = m;
                        }
                    }
                }
                (out, vec![c, oh, ow])
            }
            Layer::Add { from } => (
                cur.iter().zip(&acts[*from]).map(|(a, b)| a + b).collect(),
                cur_shape.clone(),
            ),
            Layer::SoftmaxLoss => (cur.clone(), cur_shape.clone()),
        };
        acts.push(out.clone());
        shapes.push(out_shape.clone());
        cur = out;
        cur_shape = out_shape;
    }
    acts[net.layers.len() - 2].clone()
}

/// Mean cross-entropy of the batch, computed wholly in f64 with plain
/// element loops. The oracle for the implementation's forward pass.
pub fn ref_loss(net: &Network, batch: &Tensor, labels: &[usize], perturb: Option<Perturb>) -> f64 {
    let sample_len: usize = net.input_shape.iter().product();
    let mut total = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let x = &batch.data[s * sample_len..(s + 1) * sample_len];
        let logits = ref_sample_logits(net, x, &net.input_shape, perturb);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
        total += sum.ln() - (logits[label] - max);
    }
    total / labels.len() as f64
}

/// Smallest distance of any relu input (to zero) or maxpool window (top-1 to
/// top-2 gap) over the batch. Instances for finite-difference checks must
/// keep this well above the FD step so no perturbation crosses a kink.
pub fn kink_margin(net: &Network, batch: &Tensor) -> f64 {
    let sample_len: usize = net.input_shape.iter().product();
    let n = batch.dim0();
    let mut margin = f64::INFINITY;
    for s in 0..n {
        let x = &batch.data[s * sample_len..(s + 1) * sample_len];
        let _ = ref_sample_logits_margin(net, x, &net.input_shape, None, &mut margin);
    }
    margin
}

/// Central finite difference of the reference loss w.r.t. one parameter.
pub fn fd_gradient(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    layer: usize,
    bias: bool,
    index: usize,
    eps: f64,
) -> f64 {
    let plus = ref_loss(net, batch, labels, Some(Perturb { layer, bias, index, delta: eps }));
    let minus = ref_loss(net, batch, labels, Some(Perturb { layer, bias, index, delta: -eps }));
    (plus - minus) / (2.0 * eps)
}

/// Relative error with the denominator floored, so tiny gradients are held
/// to an absolute tolerance instead of an unbounded relative one.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn seeded_batch(sample_shape: &[usize], n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = sample_shape.iter().product();
    let data: Vec<f32> = (0..n * per).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Tensor::new(shape, data).unwrap()
}

pub fn seeded_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

pub fn dense_layer(inf: usize, outf: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Dense(DenseLayer::new(inf, outf, rng))
}

/// 3-layer MLP on a 6-feature input (dense 8, dense 5, dense 3).
pub fn mlp3(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(
        vec![6],
        vec![
            dense_layer(6, 8, &mut rng),
            Layer::Relu,
            dense_layer(8, 5, &mut rng),
            Layer::Relu,
            dense_layer(5, 3, &mut rng),
            Layer::SoftmaxLoss,
        ],
    )
    .unwrap()
}

/// Conv + relu + maxpool + dense classifier on a 5x5 input.
pub fn conv_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(
        vec![1, 5, 5],
        vec![
            Layer::Conv2d(ConvLayer::new(1, 2, 3, 1, 1, &mut rng)),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            dense_layer(8, 3, &mut rng),
            Layer::SoftmaxLoss,
        ],
    )
    .unwrap()
}

/// Conv net with a residual join on a 5x5 input.
pub fn residual_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(
        vec![1, 5, 5],
        vec![
            Layer::Conv2d(ConvLayer::new(1, 2, 3, 1, 1, &mut rng)), // 0
            Layer::Relu,                                            // 1
            Layer::Conv2d(ConvLayer::new(2, 2, 3, 1, 1, &mut rng)), // 2
            Layer::Add { from: 1 },                                 // 3
            Layer::Relu,                                            // 4
            dense_layer(50, 3, &mut rng),                           // 5
            Layer::SoftmaxLoss,
        ],
    )
    .unwrap()
}

/// Strided conv variant (stride 2, no padding).
pub fn strided_conv_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(
        vec![2, 5, 5],
        vec![
            Layer::Conv2d(ConvLayer::new(2, 3, 3, 2, 0, &mut rng)),
            Layer::Relu,
            dense_layer(12, 3, &mut rng),
            Layer::SoftmaxLoss,
        ],
    )
    .unwrap()
}

/// Small labelled blob dataset: `classes` gaussian-ish clusters in
/// `features` dimensions.
pub fn blob_dataset(n: usize, features: usize, classes: usize, seed: u64) -> levelq::data::Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let angle = class as f32 / classes as f32 * std::f32::consts::TAU;
        for d in 0..features {
            let center = 1.5 * (angle + d as f32).sin();
            data.push(center + rng.gen_range(-0.5f32..0.5));
        }
        labels.push(class);
    }
    levelq::data::Dataset::new(vec![features], data, labels).unwrap()
}

/// Replaces a weighted layer's mask with fresh random bits (about half set).
pub fn randomize_mask(net: &mut Network, li: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, _, mask) = net.layers[li].params_mut().expect("weighted");
    let n = w.len();
    *mask = Mask {
        shape: w.shape.clone(),
        bits: (0..n).map(|_| rng.gen_range(0..2u8)).collect(),
    };
}

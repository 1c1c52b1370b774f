//! Sequential network with forward/backward passes and cross-entropy loss.
//!
//! Batches are processed sample-parallel; per-sample gradients are reduced
//! in batch order so results are bit-reproducible for a fixed input.

use rayon::prelude::*;

use crate::error::{LqError, Result};
use crate::layer::{ConvLayer, DenseLayer, Layer};
use crate::tensor::Tensor;

/// Ordered layer list plus the per-sample input shape.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    /// Output sample shape of every layer, fixed at construction.
    shapes: Vec<Vec<usize>>,
}

/// Gradient of the mean batch loss w.r.t. every weight and bias.
/// Indexed like `Network::layers`; `None` for non-weighted layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub per_layer: Vec<Option<LayerGrad>>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Network {
    /// Validates that layer shapes chain correctly and that the network ends
    /// with exactly one softmax-loss head.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LqError::config("network must contain at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            let is_last = i + 1 == layers.len();
            if matches!(layer, Layer::SoftmaxLoss) != is_last {
                return Err(LqError::config(
                    "softmax-loss must appear exactly once, as the final layer",
                ));
            }
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for layer in &layers {
            cur = layer
                .output_shape(&cur, &shapes)
                .map_err(|e| LqError::config(format!("layer chain: {e}")))?;
            shapes.push(cur.clone());
        }
        if shapes[layers.len() - 1].len() != 1 {
            return Err(LqError::config("classifier head expects a flat logit vector"));
        }
        Ok(Self { layers, input_shape, shapes })
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.layers.len() - 1][0]
    }

    /// Indices of conv/dense layers, in network order.
    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_weighted()).collect()
    }

    /// Total weight count over all weighted layers (biases excluded).
    pub fn num_weights(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params().map(|(w, _, _)| w.len())).sum()
    }

    pub fn output_shape_of(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    fn check_batch(&self, batch: &Tensor, labels: &[usize]) -> Result<()> {
        if batch.dim0() != labels.len() {
            return Err(LqError::argument(format!(
                "batch of {} samples vs {} labels",
                batch.dim0(),
                labels.len()
            )));
        }
        if batch.sample_shape() != self.input_shape.as_slice() {
            return Err(LqError::config(format!(
                "batch sample shape {:?} does not match network input {:?}",
                batch.sample_shape(),
                self.input_shape
            )));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LqError::argument(format!("label {bad} out of range (classes: {classes})")));
        }
        Ok(())
    }

    /// Mean cross-entropy loss and top-1 accuracy over the batch.
    /// The network is not modified.
    pub fn forward(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
        self.check_batch(batch, labels)?;
        let sample_len: usize = self.input_shape.iter().product();
        let n = labels.len();

        let per_sample: Result<Vec<(f64, bool)>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let x = &batch.data[s * sample_len..(s + 1) * sample_len];
                let acts = self.run_sample(x)?;
                let logits = &acts[self.layers.len() - 2];
                let (loss, _) = softmax_ce(logits, labels[s]);
                Ok((loss, argmax(logits) == labels[s]))
            })
            .collect();
        let per_sample = per_sample?;

        let loss: f64 = per_sample.iter().map(|(l, _)| l).sum::<f64>() / n as f64;
        let correct = per_sample.iter().filter(|(_, c)| *c).count();
        Ok((loss, correct as f64 / n as f64))
    }

    /// Softmax probabilities per sample, `[N, classes]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.sample_shape() != self.input_shape.as_slice() {
            return Err(LqError::config("batch sample shape mismatch"));
        }
        let sample_len: usize = self.input_shape.iter().product();
        let n = batch.dim0();
        let classes = self.num_classes();
        let rows: Result<Vec<Vec<f32>>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let x = &batch.data[s * sample_len..(s + 1) * sample_len];
                let acts = self.run_sample(x)?;
                Ok(softmax(&acts[self.layers.len() - 2]))
            })
            .collect();
        let mut data = Vec::with_capacity(n * classes);
        for row in rows? {
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![n, classes], data)
    }

    /// Gradient of the mean batch loss for every weight and bias.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
        Ok(self.forward_backward(batch, labels)?.2)
    }

    /// Fused pass returning (loss, accuracy, gradients).
    pub fn forward_backward(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, f64, Gradients)> {
        self.check_batch(batch, labels)?;
        let sample_len: usize = self.input_shape.iter().product();
        let n = labels.len();

        let per_sample: Result<Vec<SampleResult>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let x = &batch.data[s * sample_len..(s + 1) * sample_len];
                let acts = self.run_sample(x)?;
                Ok(self.backprop_sample(x, &acts, labels[s]))
            })
            .collect();
        let per_sample = per_sample?;

        let mut grads = self.zero_gradients();
        let mut loss = 0.0f64;
        let mut correct = 0usize;
        for sr in &per_sample {
            loss += sr.loss;
            correct += sr.correct as usize;
            for (slot, contrib) in grads.per_layer.iter_mut().zip(&sr.grads) {
                if let (Some(g), Some((wg, bg))) = (slot, contrib) {
                    for (a, b) in g.weights.data.iter_mut().zip(wg) {
                        *a += b;
                    }
                    for (a, b) in g.bias.data.iter_mut().zip(bg) {
                        *a += b;
                    }
                }
            }
        }
        let inv = 1.0 / n as f32;
        for g in grads.per_layer.iter_mut().flatten() {
            for v in &mut g.weights.data {
                *v *= inv;
            }
            for v in &mut g.bias.data {
                *v *= inv;
            }
        }
        Ok((loss / n as f64, correct as f64 / n as f64, grads))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            per_layer: self
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b, _)| LayerGrad {
                        weights: Tensor::zeros(w.shape.clone()),
                        bias: Tensor::zeros(b.shape.clone()),
                    })
                })
                .collect(),
        }
    }

    /// Runs one sample through all layers up to the classifier head,
    /// returning every intermediate activation.
    fn run_sample(&self, x: &[f32]) -> Result<Vec<Vec<f32>>> {
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input: &[f32] = if i == 0 { x } else { &acts[i - 1] };
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            let out = match layer {
                Layer::Conv2d(c) => conv_forward(c, input, in_shape),
                Layer::Dense(d) => dense_forward(d, input),
                Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool { size, stride } => maxpool_forward(input, in_shape, *size, *stride),
                Layer::Add { from } => {
                    input.iter().zip(&acts[*from]).map(|(a, b)| a + b).collect()
                }
                Layer::SoftmaxLoss => input.to_vec(),
            };
            if !out.iter().all(|v| v.is_finite()) {
                return Err(LqError::Numeric { layer: i, detail: "non-finite activation".into() });
            }
            acts.push(out);
        }
        Ok(acts)
    }

    fn backprop_sample(&self, x: &[f32], acts: &[Vec<f32>], label: usize) -> SampleResult {
        let last = self.layers.len() - 1; // softmax-loss index
        let logits = &acts[last - 1];
        let (loss, probs) = softmax_ce(logits, label);
        let correct = argmax(logits) == label;

        // dL/d(activation i); contributions can merge at residual joins.
        let mut g: Vec<Option<Vec<f32>>> = vec![None; self.layers.len()];
        let mut dlogits = probs;
        dlogits[label] -= 1.0;
        g[last - 1] = Some(dlogits);

        let mut grads: Vec<Option<(Vec<f32>, Vec<f32>)>> =
            self.layers.iter().map(|_| None).collect();

        for i in (0..last).rev() {
            let gout = match g[i].take() {
                Some(v) => v,
                None => continue, // no path to the loss (unreachable in valid nets)
            };
            let input: &[f32] = if i == 0 { x } else { &acts[i - 1] };
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            let dinput = match &self.layers[i] {
                Layer::Conv2d(c) => {
                    let (dx, dw, db) = conv_backward(c, input, in_shape, &gout);
                    grads[i] = Some((dw, db));
                    dx
                }
                Layer::Dense(d) => {
                    let (dx, dw, db) = dense_backward(d, input, &gout);
                    grads[i] = Some((dw, db));
                    dx
                }
                Layer::Relu => input
                    .iter()
                    .zip(&gout)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect(),
                Layer::MaxPool { size, stride } => {
                    maxpool_backward(input, in_shape, *size, *stride, &gout)
                }
                Layer::Add { from } => {
                    accumulate(&mut g[*from], &gout);
                    gout.clone()
                }
                Layer::SoftmaxLoss => unreachable!("head handled above"),
            };
            if i > 0 {
                accumulate(&mut g[i - 1], &dinput);
            }
        }

        SampleResult { loss, correct, grads }
    }
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

fn accumulate(slot: &mut Option<Vec<f32>>, add: &[f32]) {
    match slot {
        Some(v) => {
            for (a, b) in v.iter_mut().zip(add) {
                *a += b;
            }
        }
        None => *slot = Some(add.to_vec()),
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Cross-entropy of one sample; returns (loss, softmax probabilities).
fn softmax_ce(logits: &[f32], label: usize) -> (f64, Vec<f32>) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0f64;
    for &v in logits {
        sum += (v as f64 - max).exp();
    }
    let loss = sum.ln() - (logits[label] as f64 - max);
    let probs = logits.iter().map(|&v| (((v as f64 - max).exp()) / sum) as f32).collect();
    (loss, probs)
}

/// Valid output-column range `[lo, hi)` such that the sampled input column
/// `ox * stride + kx - pad` stays inside `[0, w)`.
fn conv_x_range(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx + stride - 1) / stride };
    let hi_num = w + pad;
    let hi = if hi_num > kx { ((hi_num - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(ow), hi)
}

fn conv_forward(c: &ConvLayer, x: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let k = c.kernel;
    let (s, p) = (c.stride, c.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0f32; c.out_ch * oh * ow];

    for oc in 0..c.out_ch {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(c.bias.data[oc]);
        for ic in 0..c.in_ch {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = c.weights.data[((oc * c.in_ch + ic) * k + ky) * k + kx];
                    let (lo, hi) = conv_x_range(ow, w, s, kx, p);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let x0 = lo * s + kx - p;
                        if s == 1 {
                            let xs = &xrow[x0..x0 + (hi - lo)];
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * s + kx - p];
                            }
                        }
                        let _ = x0;
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    c: &ConvLayer,
    x: &[f32],
    in_shape: &[usize],
    gout: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let k = c.kernel;
    let (s, p) = (c.stride, c.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;

    let mut dx = vec![0.0f32; c.in_ch * h * w];
    let mut dw = vec![0.0f32; c.weights.len()];
    let mut db = vec![0.0f32; c.out_ch];

    for oc in 0..c.out_ch {
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        db[oc] += gplane.iter().sum::<f32>();
        for ic in 0..c.in_ch {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            let dxplane_base = ic * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * c.in_ch + ic) * k + ky) * k + kx;
                    let wv = c.weights.data[widx];
                    let (lo, hi) = conv_x_range(ow, w, s, kx, p);
                    if lo >= hi {
                        continue;
                    }
                    let mut wacc = 0.0f32;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let x0 = lo * s + kx - p;
                        if s == 1 {
                            let xs = &xplane[iy as usize * w + x0..iy as usize * w + x0 + (hi - lo)];
                            for (&g, &xv) in grow[lo..hi].iter().zip(xs) {
                                wacc += g * xv;
                            }
                            let dxs = &mut dx
                                [dxplane_base + iy as usize * w + x0..dxplane_base + iy as usize * w + x0 + (hi - lo)];
                            for (d, &g) in dxs.iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * g;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * s + kx - p;
                                wacc += grow[ox] * xplane[iy as usize * w + ix];
                                dx[dxplane_base + iy as usize * w + ix] += wv * grow[ox];
                            }
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
    (dx, dw, db)
}

fn dense_forward(d: &DenseLayer, x: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(d.out_features);
    for o in 0..d.out_features {
        let row = &d.weights.data[o * d.in_features..(o + 1) * d.in_features];
        let mut acc = d.bias.data[o];
        for (&wv, &xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

fn dense_backward(d: &DenseLayer, x: &[f32], gout: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; d.in_features];
    let mut dw = vec![0.0f32; d.weights.len()];
    for o in 0..d.out_features {
        let g = gout[o];
        let row = &d.weights.data[o * d.in_features..(o + 1) * d.in_features];
        let drow = &mut dw[o * d.in_features..(o + 1) * d.in_features];
        for i in 0..d.in_features {
            dx[i] += row[i] * g;
            drow[i] = g * x[i];
        }
    }
    (dx, dw, gout.to_vec())
}

fn maxpool_forward(x: &[f32], in_shape: &[usize], size: usize, stride: usize) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..size {
                    for dx_ in 0..size {
                        m = m.max(plane[(oy * stride + dy) * w + ox * stride + dx_]);
                    }
                }
                out[(ch * oh + oy) * ow + ox] = m;
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first maximal element in scan order.
fn maxpool_backward(x: &[f32], in_shape: &[usize], size: usize, stride: usize, gout: &[f32]) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut dx = vec![0.0f32; x.len()];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (0usize, f32::NEG_INFINITY);
                for dy in 0..size {
                    for dx_ in 0..size {
                        let idx = (oy * stride + dy) * w + ox * stride + dx_;
                        if plane[idx] > best.1 {
                            best = (idx, plane[idx]);
                        }
                    }
                }
                dx[ch * h * w + best.0] += gout[(ch * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

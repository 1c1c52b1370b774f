//! Network layers: conv / dense / relu / maxpool / residual-add / softmax-loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::Codebook;
use crate::error::{LqError, Result};
use crate::tensor::{Mask, Tensor};

/// 2-D convolution over `[C, H, W]` inputs. Weights are `[out_ch, in_ch, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub mask: Mask,
    pub codebook: Option<Codebook>,
}

/// Fully connected layer. Flattens whatever sample shape it receives.
/// Weights are `[out_features, in_features]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub mask: Mask,
    pub codebook: Option<Codebook>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(ConvLayer),
    Dense(DenseLayer),
    Relu,
    MaxPool { size: usize, stride: usize },
    /// Residual connection: output = previous layer output + output of layer `from`.
    Add { from: usize },
    /// Classifier head; must be the last layer of a network.
    SoftmaxLoss,
}

/// He fan-in initialization: N(0, sqrt(2 / fan_in)) via Box-Muller.
fn he_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        out.push((z * std) as f32);
    }
    out
}

impl ConvLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = out_ch * in_ch * kernel * kernel;
        let fan_in = in_ch * kernel * kernel;
        let shape = vec![out_ch, in_ch, kernel, kernel];
        ConvLayer {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weights: Tensor { shape: shape.clone(), data: he_init(rng, n, fan_in) },
            bias: Tensor::zeros(vec![out_ch]),
            mask: Mask::ones(shape),
            codebook: None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[0] != self.in_ch {
            return Err(LqError::config(format!(
                "conv expects [{}, H, W] input, got {:?}",
                self.in_ch, input
            )));
        }
        let (h, w) = (input[1], input[2]);
        let oh = (h + 2 * self.padding).checked_sub(self.kernel).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(self.kernel).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![self.out_ch, oh, ow]),
            _ => Err(LqError::config(format!(
                "conv kernel {} does not fit input {:?} (padding {})",
                self.kernel, input, self.padding
            ))),
        }
    }
}

impl DenseLayer {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = out_features * in_features;
        let shape = vec![out_features, in_features];
        DenseLayer {
            in_features,
            out_features,
            weights: Tensor { shape: shape.clone(), data: he_init(rng, n, in_features) },
            bias: Tensor::zeros(vec![out_features]),
            mask: Mask::ones(shape),
            codebook: None,
        }
    }
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Add { .. } => "add",
            Layer::SoftmaxLoss => "softmax-loss",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    /// Weights, bias and mask of a weighted layer.
    pub fn params(&self) -> Option<(&Tensor, &Tensor, &Mask)> {
        match self {
            Layer::Conv2d(c) => Some((&c.weights, &c.bias, &c.mask)),
            Layer::Dense(d) => Some((&d.weights, &d.bias, &d.mask)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor, &mut Mask)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weights, &mut c.bias, &mut c.mask)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias, &mut d.mask)),
            _ => None,
        }
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        match self {
            Layer::Conv2d(c) => c.codebook.as_ref(),
            Layer::Dense(d) => d.codebook.as_ref(),
            _ => None,
        }
    }

    pub fn set_codebook(&mut self, cb: Option<Codebook>) {
        match self {
            Layer::Conv2d(c) => c.codebook = cb,
            Layer::Dense(d) => d.codebook = cb,
            _ => {}
        }
    }

    /// Output sample shape given the input sample shape.
    /// `prior` holds output shapes of preceding layers (for `Add`).
    pub fn output_shape(&self, input: &[usize], prior: &[Vec<usize>]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::Dense(d) => {
                let flat: usize = input.iter().product();
                if flat != d.in_features {
                    return Err(LqError::config(format!(
                        "dense expects {} input features, got {:?} ({} flattened)",
                        d.in_features, input, flat
                    )));
                }
                Ok(vec![d.out_features])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { size, stride } => {
                if input.len() != 3 {
                    return Err(LqError::config(format!("maxpool expects [C, H, W], got {:?}", input)));
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if h < *size || w < *size {
                    return Err(LqError::config(format!(
                        "maxpool window {} does not fit input {:?}",
                        size, input
                    )));
                }
                Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            Layer::Add { from } => {
                let other = prior.get(*from).ok_or_else(|| {
                    LqError::config(format!("add references layer {} before it exists", from))
                })?;
                if other != input {
                    return Err(LqError::config(format!(
                        "add shape mismatch: {:?} vs {:?} from layer {}",
                        input, other, from
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::SoftmaxLoss => Ok(input.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ConvLayer::new(3, 8, 3, 1, 1, &mut rng);
        assert_eq!(c.output_shape(&[3, 32, 32]).unwrap(), vec![8, 32, 32]);
        assert!(c.output_shape(&[4, 32, 32]).is_err());
    }

    #[test]
    fn he_init_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(he_init(&mut a, 32, 9), he_init(&mut b, 32, 9));
    }

    #[test]
    fn weighted_layers_carry_matching_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DenseLayer::new(4, 2, &mut rng);
        assert_eq!(d.mask.len(), d.weights.len());
        assert_eq!(d.mask.shape, d.weights.shape);
    }
}

//! Mini-batch SGD with gradient masking.
//!
//! The update for a trainable weight (mask bit 1) is
//!
//! ```text
//! v <- momentum * v + g + weight_decay * w
//! w <- w - lr * v
//! ```
//!
//! Frozen weights (mask bit 0) are not written at all and their momentum
//! slots are held at zero, so a frozen weight stays bit-identical no matter
//! how many steps run. Biases are never masked and take no weight decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{LqError, Result};
use crate::network::{Gradients, Network};

/// Learning-rate schedule, restarted from the base rate whenever a new
/// retraining phase begins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr = base * factor^(epoch / interval)`.
    StepDecay { factor: f64, interval: usize },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs_per_iteration: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs_per_iteration: 10,
            lr_schedule: LrSchedule::StepDecay { factor: 0.5, interval: 8 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LqError::argument("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LqError::argument("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(LqError::argument("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(LqError::argument("batch size must be at least 1"));
        }
        if let LrSchedule::StepDecay { factor, interval } = self.lr_schedule {
            if !(factor > 0.0) || interval == 0 {
                return Err(LqError::argument("step decay needs factor > 0 and interval >= 1"));
            }
        }
        Ok(())
    }

    /// Scheduled rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::StepDecay { factor, interval } => {
                (self.learning_rate as f64 * factor.powi((epoch / interval) as i32)) as f32
            }
        }
    }
}

/// Momentum buffers, one slot per weighted layer.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl SgdState {
    pub fn for_network(net: &Network) -> Self {
        SgdState {
            velocity: net
                .layers
                .iter()
                .map(|l| l.params().map(|(w, b, _)| (vec![0.0; w.len()], vec![0.0; b.len()])))
                .collect(),
        }
    }
}

/// One masked SGD step at rate `lr` (the scheduled value of
/// `config.learning_rate`).
pub fn sgd_step_masked(
    net: &mut Network,
    grads: &Gradients,
    config: &TrainConfig,
    lr: f32,
    state: &mut SgdState,
) -> Result<()> {
    if grads.per_layer.len() != net.layers.len() {
        return Err(LqError::argument("gradient set does not match network"));
    }
    let momentum = config.momentum;
    let decay = config.weight_decay;
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let Some((w, b, mask)) = layer.params_mut() else { continue };
        let g = grads.per_layer[li]
            .as_ref()
            .ok_or_else(|| LqError::argument(format!("missing gradient for layer {li}")))?;
        if g.weights.len() != w.len() || g.bias.len() != b.len() {
            return Err(LqError::argument(format!("gradient shape mismatch at layer {li}")));
        }
        let (vw, vb) = state.velocity[li].as_mut().expect("state built for this network");
        for i in 0..w.data.len() {
            if mask.bits[i] == 1 {
                vw[i] = momentum * vw[i] + g.weights.data[i] + decay * w.data[i];
                w.data[i] -= lr * vw[i];
            } else {
                vw[i] = 0.0;
            }
        }
        for i in 0..b.data.len() {
            vb[i] = momentum * vb[i] + g.bias.data[i];
            b.data[i] -= lr * vb[i];
        }
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub accuracy: f64,
}

/// Runs `config.epochs_per_iteration` epochs of shuffled mini-batch masked
/// SGD. The schedule restarts from the base rate.
pub fn train(
    net: &mut Network,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LqError::argument("training dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SgdState::for_network(net);
    let mut stats = Vec::with_capacity(config.epochs_per_iteration);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs_per_iteration {
        let lr = config.lr_at(epoch);
        shuffle(&mut indices, &mut rng);
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let (batch, labels) = dataset.batch(chunk);
            let (loss, acc, grads) = net.forward_backward(&batch, &labels)?;
            sgd_step_masked(net, &grads, config, lr, &mut state)?;
            loss_sum += loss * chunk.len() as f64;
            acc_sum += acc * chunk.len() as f64;
            seen += chunk.len();
        }
        stats.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            accuracy: acc_sum / seen as f64,
        });
    }
    Ok(stats)
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Mean loss and accuracy of `net` over a whole dataset.
pub fn evaluate(net: &Network, dataset: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(LqError::argument("evaluation dataset is empty"));
    }
    let mut loss_sum = 0.0f64;
    let mut acc_sum = 0.0f64;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = dataset.batch(chunk);
        let (loss, acc) = net.forward(&batch, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        acc_sum += acc * chunk.len() as f64;
    }
    Ok((loss_sum / dataset.len() as f64, acc_sum / dataset.len() as f64))
}

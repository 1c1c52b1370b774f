//! Quantization-loss evaluation for clusters and layers, and the loss-based
//! split deciding what gets quantized versus retrained each round.

use std::fmt::Write as _;

use crate::clustering::{Assignment, Codebook};
use crate::error::{LqError, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Quantization loss attributed to one cluster of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterLoss {
    pub layer: usize,
    pub cluster: usize,
    pub eq: f64,
}

/// How EQ is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqEstimator {
    /// Loss delta on a fixed calibration batch (snap, evaluate, restore).
    LossDelta,
    /// Within-cluster squared error; ignores calibration data.
    SseProxy,
}

impl EqEstimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss" | "loss-delta" => Ok(EqEstimator::LossDelta),
            "sse" | "sse-proxy" => Ok(EqEstimator::SseProxy),
            other => Err(LqError::argument(format!("unknown eq estimator '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EqEstimator::LossDelta => "loss-delta",
            EqEstimator::SseProxy => "sse-proxy",
        }
    }
}

/// Per-iteration quantize counts: clusters for SLQ/ESLQ, layers for MLQ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub counts: Vec<usize>,
}

impl PartitionPlan {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.iter().any(|&c| c == 0) {
            return Err(LqError::argument("plan counts must be positive"));
        }
        Ok(Self { counts })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let counts: std::result::Result<Vec<usize>, _> =
            s.split(',').map(|t| t.trim().parse::<usize>()).collect();
        match counts {
            Ok(c) => Self::new(c),
            Err(_) => Err(LqError::argument(format!("cannot parse plan '{s}'"))),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn validate_total(&self, expected: usize, what: &str) -> Result<()> {
        if self.total() != expected {
            return Err(LqError::config(format!(
                "plan {:?} sums to {}, but {} {} must be covered",
                self.counts,
                self.total(),
                expected,
                what
            )));
        }
        Ok(())
    }

    /// Default cluster plan for a codebook of `k` centroids. The published
    /// settings cover k in {17, 9, 5, 3}; other sizes fall back to halving
    /// the remainder each round.
    pub fn default_for_clusters(k: usize) -> Self {
        let counts = match k {
            17 => vec![5, 4, 4, 2, 2],
            9 => vec![3, 2, 2, 2],
            5 => vec![2, 2, 1],
            3 => vec![2, 1],
            _ => Self::halving(k),
        };
        Self { counts }
    }

    /// Default layer-group plan: ceil(L/3) layers per round.
    pub fn default_for_layers(layers: usize) -> Self {
        let group = layers.div_ceil(3).max(1);
        Self { counts: Self::grouped(layers, group) }
    }

    fn halving(mut remaining: usize) -> Vec<usize> {
        let mut counts = Vec::new();
        while remaining > 0 {
            let take = (remaining.div_ceil(2)).max(1);
            counts.push(take);
            remaining -= take;
        }
        counts
    }

    fn grouped(total: usize, group: usize) -> Vec<usize> {
        let mut counts = Vec::new();
        let mut left = total;
        while left > 0 {
            let take = group.min(left);
            counts.push(take);
            left -= take;
        }
        counts
    }
}

/// Disjoint, exhaustive split of candidate ids into a quantize set and a
/// retrain set, ordered so the quantize set holds the larger losses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub quantize: Vec<usize>,
    pub retrain: Vec<usize>,
}

fn partition_by_loss(items: &[(usize, f64)], count: usize) -> Result<Split> {
    if count == 0 || count > items.len() {
        return Err(LqError::argument(format!(
            "partition count {} out of range for {} candidates",
            count,
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    // Bigger loss first; ties resolve to the lower id.
    order.sort_by(|&a, &b| {
        items[b].1.partial_cmp(&items[a].1).unwrap().then(items[a].0.cmp(&items[b].0))
    });
    let mut quantize: Vec<usize> = order[..count].iter().map(|&i| items[i].0).collect();
    let mut retrain: Vec<usize> = order[count..].iter().map(|&i| items[i].0).collect();
    quantize.sort_unstable();
    retrain.sort_unstable();
    Ok(Split { quantize, retrain })
}

/// Splits clusters by EQ: the `count` highest-loss clusters are quantized,
/// the rest retrain.
pub fn loss_based_partition(losses: &[ClusterLoss], count: usize) -> Result<Split> {
    let items: Vec<(usize, f64)> = losses.iter().map(|l| (l.cluster, l.eq)).collect();
    partition_by_loss(&items, count)
}

/// Layer-level analogue used by incremental layer compensation.
pub fn ilc_partition(layer_losses: &[(usize, f64)], count: usize) -> Result<Split> {
    partition_by_loss(layer_losses, count)
}

/// Sum of squared distances of one cluster's members to their centroid.
pub fn sse_proxy_loss(
    weights: &[f32],
    codebook: &Codebook,
    assignment: &Assignment,
    cluster: usize,
) -> f64 {
    let c = codebook.centroids[cluster] as f64;
    weights
        .iter()
        .zip(assignment)
        .filter(|(_, &a)| a as usize == cluster)
        .map(|(&w, _)| {
            let d = w as f64 - c;
            d * d
        })
        .sum()
}

fn snapped_clone(
    net: &Network,
    layer_idx: usize,
    targets: &[(usize, f32)],
    assignment: &Assignment,
) -> Result<Network> {
    let mut probe = net.clone();
    let (w, _, _) = probe.layers[layer_idx]
        .params_mut()
        .ok_or_else(|| LqError::argument(format!("layer {layer_idx} carries no weights")))?;
    if w.len() != assignment.len() {
        return Err(LqError::argument("assignment does not cover the weight tensor"));
    }
    for (i, &a) in assignment.iter().enumerate() {
        for &(cluster, value) in targets {
            if a as usize == cluster {
                w.data[i] = value;
            }
        }
    }
    Ok(probe)
}

/// EQ of snapping one cluster to its centroid: the loss delta on the
/// calibration batch. The input network is untouched.
pub fn cluster_quant_loss(
    net: &Network,
    layer_idx: usize,
    codebook: &Codebook,
    assignment: &Assignment,
    cluster: usize,
    calibration: (&Tensor, &[usize]),
) -> Result<f64> {
    if cluster >= codebook.k() {
        return Err(LqError::argument(format!("cluster {cluster} out of range")));
    }
    let (base, _) = net.forward(calibration.0, calibration.1)?;
    let probe = snapped_clone(net, layer_idx, &[(cluster, codebook.centroids[cluster])], assignment)?;
    let (snapped, _) = probe.forward(calibration.0, calibration.1)?;
    Ok(snapped - base)
}

/// Loss-delta EQ for several clusters of one layer, reusing one base loss.
pub fn cluster_losses_for_layer(
    net: &Network,
    layer_idx: usize,
    codebook: &Codebook,
    assignment: &Assignment,
    clusters: &[usize],
    calibration: (&Tensor, &[usize]),
    base_loss: f64,
) -> Result<Vec<ClusterLoss>> {
    let mut out = Vec::with_capacity(clusters.len());
    for &cluster in clusters {
        let probe =
            snapped_clone(net, layer_idx, &[(cluster, codebook.centroids[cluster])], assignment)?;
        let (snapped, _) = probe.forward(calibration.0, calibration.1)?;
        out.push(ClusterLoss { layer: layer_idx, cluster, eq: snapped - base_loss });
    }
    Ok(out)
}

/// Outer clusters (a, c) of a ternary codebook, or the middle one (b).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPart {
    Boundaries,
    Heart,
}

impl LayerPart {
    pub fn clusters(self) -> &'static [usize] {
        match self {
            LayerPart::Boundaries => &[0, 2],
            LayerPart::Heart => &[1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerPart::Boundaries => "boundaries",
            LayerPart::Heart => "heart",
        }
    }
}

/// EQ of snapping a layer's Boundaries or Heart to explicit target values.
/// `targets` pairs cluster ids of the part with the values sharing would use.
pub fn layer_part_loss(
    net: &Network,
    layer_idx: usize,
    assignment: &Assignment,
    targets: &[(usize, f32)],
    calibration: (&Tensor, &[usize]),
    base_loss: f64,
) -> Result<f64> {
    let probe = snapped_clone(net, layer_idx, targets, assignment)?;
    let (snapped, _) = probe.forward(calibration.0, calibration.1)?;
    Ok(snapped - base_loss)
}

/// EQ of snapping a layer part to its ternary centroids. Membership is
/// derived by nearest centroid, which matches the converged assignment.
pub fn layer_quant_loss(
    net: &Network,
    layer_idx: usize,
    codebook: &Codebook,
    part: LayerPart,
    calibration: (&Tensor, &[usize]),
) -> Result<f64> {
    if codebook.k() != 3 {
        return Err(LqError::state(format!(
            "layer part loss needs a 3-centroid codebook, found {}",
            codebook.k()
        )));
    }
    let (w, _, _) = net.layers[layer_idx]
        .params()
        .ok_or_else(|| LqError::argument(format!("layer {layer_idx} carries no weights")))?;
    let assignment: Assignment = w.data.iter().map(|&v| codebook.nearest(v) as u32).collect();
    let targets: Vec<(usize, f32)> =
        part.clusters().iter().map(|&c| (c, codebook.centroids[c])).collect();
    let (base, _) = net.forward(calibration.0, calibration.1)?;
    layer_part_loss(net, layer_idx, &assignment, &targets, calibration, base)
}

/// Appends `round,layer,cluster,eq,chosen` rows for one round.
pub fn append_eq_csv(out: &mut String, round: usize, losses: &[ClusterLoss], chosen: &[(usize, Vec<usize>)]) {
    for l in losses {
        let picked = chosen
            .iter()
            .find(|(layer, _)| *layer == l.layer)
            .is_some_and(|(_, cs)| cs.contains(&l.cluster));
        let set = if picked { "quantize" } else { "retrain" };
        let _ = writeln!(out, "{},{},{},{:.9e},{}", round, l.layer, l.cluster, l.eq, set);
    }
}

pub const EQ_CSV_HEADER: &str = "round,layer,cluster,eq,chosen";

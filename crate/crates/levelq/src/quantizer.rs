//! Quantization drivers: SLQ (cluster partitioning), ESLQ (type-constrained
//! centroids) and MLQ (ternary with incremental layer compensation), plus
//! weight-sharing, freeze bookkeeping and post-run verification.

use std::collections::BTreeMap;

use crate::clustering::{
    constrained_kmeans, init_centroids, kmeans, t_centroid, Assignment, CentroidConstraint,
    Codebook, InitMode, TCentroidKind, TCentroidSpec, CENTROID_GAP, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::data::Dataset;
use crate::error::{LqError, Result};
use crate::network::Network;
use crate::partition::{
    cluster_losses_for_layer, ilc_partition, layer_part_loss, loss_based_partition,
    sse_proxy_loss, ClusterLoss, EqEstimator, LayerPart, PartitionPlan,
};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Quantization driver selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Slq,
    Eslq,
    Mlq,
}

impl QuantMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slq" => Ok(QuantMode::Slq),
            "eslq" => Ok(QuantMode::Eslq),
            "mlq" => Ok(QuantMode::Mlq),
            other => Err(LqError::argument(format!("unknown quantization mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Slq => "slq",
            QuantMode::Eslq => "eslq",
            QuantMode::Mlq => "mlq",
        }
    }
}

/// Full driver configuration.
#[derive(Debug, Clone)]
pub struct QuantConfig {
    pub bits: u32,
    pub mode: QuantMode,
    /// Cluster counts per round (SLQ/ESLQ) or layer counts per ILC round
    /// (MLQ). `None` selects the default for the bit width / layer count.
    pub plan: Option<PartitionPlan>,
    pub t_spec: Option<TCentroidSpec>,
    pub eq_estimator: EqEstimator,
    pub retrain: TrainConfig,
    /// MLQ: share the heart cluster at exactly zero.
    pub zero_heart: bool,
    pub init_mode: InitMode,
    /// Samples in the fixed calibration batch used for EQ and loss markers.
    pub calibration_size: usize,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 5,
            mode: QuantMode::Slq,
            plan: None,
            t_spec: None,
            eq_estimator: EqEstimator::LossDelta,
            retrain: TrainConfig::default(),
            zero_heart: true,
            init_mode: InitMode::Exponential,
            calibration_size: 256,
            seed: 0,
        }
    }
}

impl QuantConfig {
    /// Codebook size per layer: `2^(b-1) + 1`, or 3 for the ternary driver.
    pub fn clusters_per_layer(&self) -> usize {
        match self.mode {
            QuantMode::Mlq => 3,
            _ => (1usize << (self.bits - 1)) + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(LqError::config("bit width must be at least 2"));
        }
        if self.mode == QuantMode::Mlq && self.bits != 2 {
            return Err(LqError::config("mlq is ternary: bit width must be 2"));
        }
        if self.mode == QuantMode::Eslq && self.t_spec.is_none() {
            return Err(LqError::config("eslq requires a t-centroid spec"));
        }
        if let Some(plan) = &self.plan {
            if self.mode != QuantMode::Mlq {
                plan.validate_total(self.clusters_per_layer(), "clusters")?;
            }
        }
        if self.calibration_size == 0 {
            return Err(LqError::config("calibration size must be positive"));
        }
        self.retrain.validate()
    }
}

/// Clustering state of one weighted layer.
#[derive(Debug, Clone)]
pub struct LayerQuant {
    pub codebook: Codebook,
    pub assignment: Assignment,
}

/// Driver state across rounds: per-layer codebooks/assignments plus the
/// expected final codebook size.
#[derive(Debug, Clone)]
pub struct QuantState {
    pub expected_k: usize,
    pub layers: BTreeMap<usize, LayerQuant>,
    pub iteration: usize,
}

impl QuantState {
    pub fn new(expected_k: usize) -> Self {
        QuantState { expected_k, layers: BTreeMap::new(), iteration: 0 }
    }
}

/// Which part of the model a round worked on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Clusters,
    Boundaries,
    Hearts,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Clusters => "clusters",
            Phase::Boundaries => "boundaries",
            Phase::Hearts => "hearts",
        }
    }
}

/// Record of one quantization round.
#[derive(Debug, Clone)]
pub struct QuantReport {
    pub round: usize,
    pub phase: Phase,
    pub cluster_losses: Vec<ClusterLoss>,
    /// Clusters frozen this round, per layer.
    pub chosen: Vec<(usize, Vec<usize>)>,
    pub pre_quant_loss: f64,
    pub post_share_loss: f64,
    pub post_retrain_loss: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub frozen_fraction: f64,
}

/// Final product of a driver run.
#[derive(Debug, Clone)]
pub struct QuantOutcome {
    pub network: Network,
    pub state: QuantState,
    pub reports: Vec<QuantReport>,
}

/// One codebook-or-weight inconsistency found by [`verify_quantized`].
#[derive(Debug, Clone)]
pub struct Violation {
    pub layer: usize,
    pub index: Option<usize>,
    pub detail: String,
}

/// Snaps every weight of the listed clusters onto its centroid, clears the
/// matching mask bits and marks the centroids frozen. Everything else is
/// untouched.
pub fn weight_share(layer: &mut crate::layer::Layer, lq: &mut LayerQuant, clusters: &[usize]) -> Result<()> {
    for &c in clusters {
        if c >= lq.codebook.k() {
            return Err(LqError::argument(format!("cluster {c} out of range")));
        }
        if lq.codebook.frozen[c] {
            return Err(LqError::state(format!("cluster {c} is already frozen")));
        }
    }
    let (w, _, mask) = layer
        .params_mut()
        .ok_or_else(|| LqError::argument("weight sharing needs a weighted layer"))?;
    if w.len() != lq.assignment.len() {
        return Err(LqError::argument("assignment does not cover the weight tensor"));
    }
    for (i, &a) in lq.assignment.iter().enumerate() {
        if clusters.contains(&(a as usize)) {
            w.data[i] = lq.codebook.centroids[a as usize];
            mask.bits[i] = 0;
        }
    }
    for &c in clusters {
        lq.codebook.frozen[c] = true;
    }
    layer.set_codebook(Some(lq.codebook.clone()));
    Ok(())
}

/// Checks that a finished run left every weight frozen exactly on a centroid
/// of a full-size codebook. Returns all violations (empty on success).
pub fn verify_quantized(net: &Network, state: &QuantState) -> Vec<Violation> {
    let mut out = Vec::new();
    for li in net.weighted_indices() {
        let (w, _, mask) = net.layers[li].params().expect("weighted");
        match state.layers.get(&li) {
            None => {
                for i in 0..w.len() {
                    out.push(Violation { layer: li, index: Some(i), detail: "no codebook".into() });
                }
            }
            Some(lq) => {
                if lq.codebook.k() != state.expected_k {
                    out.push(Violation {
                        layer: li,
                        index: None,
                        detail: format!(
                            "codebook holds {} centroids, expected {}",
                            lq.codebook.k(),
                            state.expected_k
                        ),
                    });
                }
                for (c, &frozen) in lq.codebook.frozen.iter().enumerate() {
                    if !frozen {
                        out.push(Violation {
                            layer: li,
                            index: None,
                            detail: format!("centroid {c} never frozen"),
                        });
                    }
                }
                for i in 0..w.len() {
                    if mask.bits[i] != 0 {
                        out.push(Violation { layer: li, index: Some(i), detail: "mask bit still trainable".into() });
                    } else if !lq.codebook.centroids.iter().any(|&c| c.to_bits() == w.data[i].to_bits()) {
                        out.push(Violation {
                            layer: li,
                            index: Some(i),
                            detail: format!("weight {} not a codebook centroid", w.data[i]),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Fraction of weights whose mask bit is 0.
pub fn frozen_fraction(net: &Network) -> f64 {
    let mut frozen = 0usize;
    let mut total = 0usize;
    for li in net.weighted_indices() {
        let (_, _, mask) = net.layers[li].params().expect("weighted");
        frozen += mask.frozen_count();
        total += mask.len();
    }
    if total == 0 {
        0.0
    } else {
        frozen as f64 / total as f64
    }
}

// ── driver plumbing ───────────────────────────────────────────────────

struct Ctx<'a> {
    config: &'a QuantConfig,
    eval_set: Option<&'a Dataset>,
    calib_batch: Tensor,
    calib_labels: Vec<usize>,
}

impl<'a> Ctx<'a> {
    fn new(config: &'a QuantConfig, train_set: &'a Dataset, eval_set: Option<&'a Dataset>) -> Result<Self> {
        if train_set.is_empty() {
            return Err(LqError::argument("training dataset is empty"));
        }
        let calib = train_set.subset(config.calibration_size, config.seed ^ 0xca11_b8a7);
        let (calib_batch, calib_labels) = calib.head_batch(calib.len());
        Ok(Ctx { config, eval_set, calib_batch, calib_labels })
    }

    fn calib(&self) -> (&Tensor, &[usize]) {
        (&self.calib_batch, &self.calib_labels)
    }

    fn calib_loss(&self, net: &Network) -> Result<f64> {
        Ok(net.forward(&self.calib_batch, &self.calib_labels)?.0)
    }

    fn retrain_seed(&self, round: usize) -> u64 {
        self.config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(round as u64 + 1))
    }

    fn eval(&self, net: &Network) -> Result<(Option<f64>, Option<f64>)> {
        match self.eval_set {
            Some(ds) => {
                let (l, a) = crate::train::evaluate(net, ds, 256)?;
                Ok((Some(l), Some(a)))
            }
            None => Ok((None, None)),
        }
    }
}

/// Initial centroids with a linear fallback when the exponential ladder
/// collapses under clamping (e.g. one-sided weight distributions).
fn initial_centroids(weights: &[f32], k: usize, mode: InitMode) -> Result<Vec<f32>> {
    let c = init_centroids(weights, k, mode)?;
    if c.len() == k {
        Ok(c)
    } else {
        init_centroids(weights, k, InitMode::Linear)
    }
}

fn next_up(v: f32) -> f32 {
    if v == f32::MAX || v.is_nan() {
        return v;
    }
    let bits = v.to_bits();
    f32::from_bits(if v >= 0.0 { bits + 1 } else { bits - 1 })
}

enum Origin {
    Frozen(usize),
    Free(usize),
}

/// Rebuilds a full codebook from the frozen part of `prev` plus a fresh
/// sub-clustering of the free weights, remapping every weight's cluster id.
fn merge_clustering(
    prev: &LayerQuant,
    sub_codebook: &Codebook,
    sub_assignment: &Assignment,
    free_positions: &[usize],
    mask_bits: &[u8],
) -> Result<LayerQuant> {
    let mut entries: Vec<(f32, bool, Origin)> = Vec::new();
    for (f, &frozen) in prev.codebook.frozen.iter().enumerate() {
        if frozen {
            entries.push((prev.codebook.centroids[f], true, Origin::Frozen(f)));
        }
    }
    for (j, &c) in sub_codebook.centroids.iter().enumerate() {
        entries.push((c, false, Origin::Free(j)));
    }
    // Frozen entries win ties so a colliding free centroid gets nudged.
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
    for i in 1..entries.len() {
        while (entries[i].0 as f64 - entries[i - 1].0 as f64) <= CENTROID_GAP {
            debug_assert!(!entries[i].1, "frozen centroids can never collide");
            entries[i].0 = next_up(entries[i].0);
        }
    }

    let k = entries.len();
    let mut centroids = Vec::with_capacity(k);
    let mut frozen = Vec::with_capacity(k);
    let mut frozen_map: BTreeMap<usize, u32> = BTreeMap::new();
    let mut free_map: BTreeMap<usize, u32> = BTreeMap::new();
    for (new_id, (v, fz, origin)) in entries.into_iter().enumerate() {
        centroids.push(v);
        frozen.push(fz);
        match origin {
            Origin::Frozen(old) => {
                frozen_map.insert(old, new_id as u32);
            }
            Origin::Free(j) => {
                free_map.insert(j, new_id as u32);
            }
        }
    }
    let codebook = Codebook::new(centroids, frozen)?;

    let mut assignment = vec![0u32; mask_bits.len()];
    let mut free_cursor = 0usize;
    for (i, &bit) in mask_bits.iter().enumerate() {
        if bit == 0 {
            let old = prev.assignment[i] as usize;
            assignment[i] = *frozen_map.get(&old).ok_or_else(|| {
                LqError::state("frozen weight assigned to an unfrozen cluster".to_string())
            })?;
        } else {
            debug_assert_eq!(free_positions[free_cursor], i);
            assignment[i] = free_map[&(sub_assignment[free_cursor] as usize)];
            free_cursor += 1;
        }
    }
    Ok(LayerQuant { codebook, assignment })
}

/// Clusters the free weights of layer `li` into the remaining centroid
/// slots, keeping frozen centroids fixed.
fn recluster_layer(
    net: &Network,
    li: usize,
    prev: Option<&LayerQuant>,
    k: usize,
    init_mode: InitMode,
) -> Result<LayerQuant> {
    let (w, _, mask) = net.layers[li].params().expect("weighted layer");
    match prev {
        None => {
            let init = initial_centroids(&w.data, k, init_mode)?;
            let out = kmeans(&w.data, &init, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            Ok(LayerQuant { codebook: out.codebook, assignment: out.assignment })
        }
        Some(prev) => {
            let free_positions: Vec<usize> =
                (0..w.len()).filter(|&i| mask.bits[i] == 1).collect();
            let free_values: Vec<f32> = free_positions.iter().map(|&i| w.data[i]).collect();
            let free_init: Vec<f32> = prev
                .codebook
                .unfrozen_indices()
                .iter()
                .map(|&i| prev.codebook.centroids[i])
                .collect();
            if free_init.is_empty() || free_values.is_empty() {
                return Err(LqError::state("no free clusters left to re-cluster"));
            }
            let out = kmeans(&free_values, &free_init, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            merge_clustering(prev, &out.codebook, &out.assignment, &free_positions, &mask.bits)
        }
    }
}

fn round_cluster_losses(net: &Network, state: &QuantState, ctx: &Ctx) -> Result<(f64, Vec<ClusterLoss>)> {
    let base = ctx.calib_loss(net)?;
    let mut all = Vec::new();
    for (&li, lq) in &state.layers {
        let unfrozen = lq.codebook.unfrozen_indices();
        match ctx.config.eq_estimator {
            EqEstimator::LossDelta => {
                all.extend(cluster_losses_for_layer(
                    net,
                    li,
                    &lq.codebook,
                    &lq.assignment,
                    &unfrozen,
                    ctx.calib(),
                    base,
                )?);
            }
            EqEstimator::SseProxy => {
                let (w, _, _) = net.layers[li].params().expect("weighted");
                for c in unfrozen {
                    all.push(ClusterLoss {
                        layer: li,
                        cluster: c,
                        eq: sse_proxy_loss(&w.data, &lq.codebook, &lq.assignment, c),
                    });
                }
            }
        }
    }
    Ok((base, all))
}

/// Per-round hook; receives the network, state and report after retraining.
pub type RoundHook<'h> = dyn FnMut(&Network, &QuantState, &QuantReport) -> Result<()> + 'h;

// ── SLQ / ESLQ ────────────────────────────────────────────────────────

pub fn run_slq(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
) -> Result<QuantOutcome> {
    run_slq_with(net, train_set, eval_set, config, &mut |_, _, _| Ok(()))
}

pub fn run_eslq(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
) -> Result<QuantOutcome> {
    run_eslq_with(net, train_set, eval_set, config, &mut |_, _, _| Ok(()))
}

pub fn run_slq_with(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
    hook: &mut RoundHook,
) -> Result<QuantOutcome> {
    if config.mode != QuantMode::Slq {
        return Err(LqError::config("run_slq requires mode = slq"));
    }
    cluster_driver(net, train_set, eval_set, config, None, hook)
}

pub fn run_eslq_with(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
    hook: &mut RoundHook,
) -> Result<QuantOutcome> {
    if config.mode != QuantMode::Eslq {
        return Err(LqError::config("run_eslq requires mode = eslq"));
    }
    let spec = config.t_spec.ok_or_else(|| LqError::config("eslq requires a t-centroid spec"))?;
    cluster_driver(net, train_set, eval_set, config, Some(spec), hook)
}

/// Shared SLQ/ESLQ loop. With a `t_spec`, partitioned clusters are
/// re-clustered under an L1 pull toward their type targets and shared at
/// exactly those targets.
fn cluster_driver(
    mut net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
    t_spec: Option<TCentroidSpec>,
    hook: &mut RoundHook,
) -> Result<QuantOutcome> {
    config.validate()?;
    let ctx = Ctx::new(config, train_set, eval_set)?;
    let k = config.clusters_per_layer();
    let plan = config.plan.clone().unwrap_or_else(|| PartitionPlan::default_for_clusters(k));
    plan.validate_total(k, "clusters")?;

    let mut state = QuantState::new(k);
    let mut reports = Vec::with_capacity(plan.counts.len());

    for (m, &count) in plan.counts.iter().enumerate() {
        // Re-cluster free weights into the remaining slots.
        for li in net.weighted_indices() {
            let lq = recluster_layer(&net, li, state.layers.get(&li), k, config.init_mode)?;
            state.layers.insert(li, lq);
        }

        let (pre_quant_loss, losses) = round_cluster_losses(&net, &state, &ctx)?;

        let mut chosen: Vec<(usize, Vec<usize>)> = Vec::new();
        for &li in state.layers.keys().cloned().collect::<Vec<_>>().iter() {
            let layer_losses: Vec<ClusterLoss> =
                losses.iter().filter(|l| l.layer == li).copied().collect();
            let split = loss_based_partition(&layer_losses, count)?;
            chosen.push((li, split.quantize));
        }

        if let Some(spec) = t_spec {
            reconstrain_round(&net, &mut state, &mut chosen, spec)?;
        }

        for (li, clusters) in &chosen {
            let lq = state.layers.get_mut(li).expect("clustered");
            weight_share(&mut net.layers[*li], lq, clusters)?;
        }

        let post_share_loss = ctx.calib_loss(&net)?;
        let stats = train(&mut net, train_set, &config.retrain, ctx.retrain_seed(m))?;
        let post_retrain_loss = ctx.calib_loss(&net)?;
        let (eval_loss, eval_accuracy) = ctx.eval(&net)?;

        state.iteration += 1;
        let report = QuantReport {
            round: m + 1,
            phase: Phase::Clusters,
            cluster_losses: losses,
            chosen,
            pre_quant_loss,
            post_share_loss,
            post_retrain_loss,
            train_loss: stats.last().map_or(post_retrain_loss, |s| s.loss),
            train_accuracy: stats.last().map_or(0.0, |s| s.accuracy),
            eval_loss,
            eval_accuracy,
            frozen_fraction: frozen_fraction(&net),
        };
        hook(&net, &state, &report)?;
        reports.push(report);
    }

    Ok(QuantOutcome { network: net, state, reports })
}

/// ESLQ round step: pick distinct type targets for the chosen clusters,
/// re-cluster the free weights under the L1 pull, then pin the chosen
/// centroids to their targets exactly. Rewrites each layer's chosen-cluster
/// ids to their positions in the rebuilt codebook.
fn reconstrain_round(
    net: &Network,
    state: &mut QuantState,
    chosen: &mut [(usize, Vec<usize>)],
    spec: TCentroidSpec,
) -> Result<()> {
    for (li, clusters) in chosen.iter_mut() {
        let prev = state.layers.get(li).expect("clustered");
        let (w, _, mask) = net.layers[*li].params().expect("weighted");

        let unfrozen = prev.codebook.unfrozen_indices();
        let free_init: Vec<f32> = unfrozen.iter().map(|&i| prev.codebook.centroids[i]).collect();
        let free_positions: Vec<usize> = (0..w.len()).filter(|&i| mask.bits[i] == 1).collect();
        let free_values: Vec<f32> = free_positions.iter().map(|&i| w.data[i]).collect();

        // Targets must stay distinct among themselves and from frozen values.
        let mut taken: Vec<f32> = prev
            .codebook
            .centroids
            .iter()
            .zip(&prev.codebook.frozen)
            .filter(|(_, &f)| f)
            .map(|(&c, _)| c)
            .collect();
        let mut specs: Vec<Option<CentroidConstraint>> = vec![None; free_init.len()];
        for &cluster in clusters.iter() {
            let slot = unfrozen
                .iter()
                .position(|&u| u == cluster)
                .ok_or_else(|| LqError::state(format!("cluster {cluster} is already frozen")))?;
            let target = distinct_t_centroid(prev.codebook.centroids[cluster], spec.kind, &taken);
            taken.push(target);
            specs[slot] = Some(CentroidConstraint { target, beta: spec.beta });
        }

        let out = constrained_kmeans(&free_values, &free_init, &specs, DEFAULT_MAX_ITER, DEFAULT_TOL)?;

        // Pin constrained centroids to their exact targets; sharing will
        // write these exact values.
        let mut sub_centroids = out.codebook.centroids.clone();
        for (out_idx, &slot) in out.slot_order.iter().enumerate() {
            if let Some(c) = specs[slot] {
                sub_centroids[out_idx] = c.target;
            }
        }
        let chosen_sub: Vec<usize> = out
            .slot_order
            .iter()
            .enumerate()
            .filter(|(_, &slot)| specs[slot].is_some())
            .map(|(out_idx, _)| out_idx)
            .collect();

        let pinned = sort_sub_codebook(sub_centroids, &out.assignment, &chosen_sub)?;
        let merged =
            merge_clustering(prev, &pinned.codebook, &pinned.assignment, &free_positions, &mask.bits)?;

        // The chosen merged ids are the clusters sitting on the pinned values.
        let mut new_chosen: Vec<usize> = Vec::with_capacity(pinned.chosen.len());
        for &sub_id in &pinned.chosen {
            let value = pinned.codebook.centroids[sub_id];
            let merged_id = merged
                .codebook
                .centroids
                .iter()
                .position(|&c| c.to_bits() == value.to_bits())
                .ok_or_else(|| LqError::state("pinned centroid lost in merge"))?;
            new_chosen.push(merged_id);
        }
        new_chosen.sort_unstable();

        state.layers.insert(*li, merged);
        *clusters = new_chosen;
    }

    Ok(())
}

struct PinnedSub {
    codebook: Codebook,
    assignment: Assignment,
    chosen: Vec<usize>,
}

/// Sorts pinned sub-centroids ascending, remapping assignment ids and the
/// chosen-id list, and nudging any collisions apart.
fn sort_sub_codebook(centroids: Vec<f32>, assignment: &Assignment, chosen: &[usize]) -> Result<PinnedSub> {
    let k = centroids.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).unwrap());
    let mut sorted: Vec<f32> = order.iter().map(|&i| centroids[i]).collect();
    for i in 1..k {
        while (sorted[i] as f64 - sorted[i - 1] as f64) <= CENTROID_GAP {
            sorted[i] = next_up(sorted[i]);
        }
    }
    let mut remap = vec![0u32; k];
    for (new_id, &old_id) in order.iter().enumerate() {
        remap[old_id] = new_id as u32;
    }
    Ok(PinnedSub {
        codebook: Codebook::new(sorted, vec![false; k])?,
        assignment: assignment.iter().map(|&a| remap[a as usize]).collect(),
        chosen: chosen.iter().map(|&c| remap[c] as usize).collect(),
    })
}

/// Nearest admissible type value not already taken.
fn distinct_t_centroid(value: f32, kind: TCentroidKind, taken: &[f32]) -> f32 {
    let base = t_centroid(value, kind);
    let clash = |cand: f32| taken.iter().any(|&t| (t as f64 - cand as f64).abs() <= CENTROID_GAP);
    if !clash(base) {
        return base;
    }
    let mut candidates: Vec<f32> = Vec::new();
    match kind {
        TCentroidKind::PowerOfTwoOrZero => {
            candidates.push(0.0);
            let scale = if value == 0.0 { 0 } else { (value.abs() as f64).log2().floor() as i32 };
            for z in (scale - 24)..=(scale + 2) {
                let m = 2.0f64.powi(z) as f32;
                candidates.push(m);
                candidates.push(-m);
            }
        }
        TCentroidKind::Scientific2Sig => {
            let step = if base == 0.0 {
                (value.abs().max(1e-6) as f64) / 10.0
            } else {
                10.0f64.powf((base.abs() as f64).log10().floor() - 1.0)
            };
            for j in 1..200 {
                candidates.push((base as f64 + j as f64 * step) as f32);
                candidates.push((base as f64 - j as f64 * step) as f32);
            }
        }
    }
    candidates.retain(|&c| !clash(c));
    candidates.sort_by(|&a, &b| {
        let da = (a as f64 - value as f64).abs();
        let db = (b as f64 - value as f64).abs();
        da.partial_cmp(&db).unwrap().then(a.abs().partial_cmp(&b.abs()).unwrap())
    });
    candidates.first().copied().unwrap_or(base)
}

// ── MLQ ───────────────────────────────────────────────────────────────

pub fn run_mlq(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
) -> Result<QuantOutcome> {
    run_mlq_with(net, train_set, eval_set, config, &mut |_, _, _| Ok(()))
}

/// Ternary driver: one 3-means per layer up front, then two ILC phases.
/// Boundaries (outer clusters) are quantized layer-group by layer-group with
/// retraining in between, then hearts likewise (at exactly zero when
/// `zero_heart` is set). Cluster membership is fixed by the initial
/// clustering; shared values refresh to the members' current means.
pub fn run_mlq_with(
    mut net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
    hook: &mut RoundHook,
) -> Result<QuantOutcome> {
    if config.mode != QuantMode::Mlq {
        return Err(LqError::config("run_mlq requires mode = mlq"));
    }
    config.validate()?;
    let ctx = Ctx::new(config, train_set, eval_set)?;
    let layers = net.weighted_indices();
    let plan = config
        .plan
        .clone()
        .unwrap_or_else(|| PartitionPlan::default_for_layers(layers.len()));
    plan.validate_total(layers.len(), "layers")?;

    let mut state = QuantState::new(3);
    for &li in &layers {
        let (w, _, _) = net.layers[li].params().expect("weighted");
        let init = initial_centroids(&w.data, 3, config.init_mode)?;
        let out = kmeans(&w.data, &init, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
        state.layers.insert(li, LayerQuant { codebook: out.codebook, assignment: out.assignment });
    }

    let mut reports = Vec::new();
    let mut round = 0usize;
    for (phase, part) in [(Phase::Boundaries, LayerPart::Boundaries), (Phase::Hearts, LayerPart::Heart)] {
        let mut remaining: Vec<usize> = layers.clone();
        for &group in &plan.counts {
            round += 1;
            let base = ctx.calib_loss(&net)?;

            // Refreshed share targets per remaining layer.
            let mut targets: BTreeMap<usize, Vec<(usize, f32)>> = BTreeMap::new();
            for &li in &remaining {
                targets.insert(li, share_targets(&net, &state, li, part, config.zero_heart));
            }

            let mut losses: Vec<(usize, f64)> = Vec::with_capacity(remaining.len());
            for &li in &remaining {
                let lq = &state.layers[&li];
                let eq = match config.eq_estimator {
                    EqEstimator::LossDelta => {
                        layer_part_loss(&net, li, &lq.assignment, &targets[&li], ctx.calib(), base)?
                    }
                    EqEstimator::SseProxy => {
                        let (w, _, _) = net.layers[li].params().expect("weighted");
                        targets[&li]
                            .iter()
                            .map(|&(c, v)| sse_to_value(&w.data, &lq.assignment, c, v))
                            .sum()
                    }
                };
                losses.push((li, eq));
            }

            let take = group.min(remaining.len());
            let split = ilc_partition(&losses, take)?;

            let mut chosen: Vec<(usize, Vec<usize>)> = Vec::new();
            for &li in &split.quantize {
                apply_share_targets(&mut state, li, &targets[&li])?;
                let lq = state.layers.get_mut(&li).expect("present");
                weight_share(&mut net.layers[li], lq, part.clusters())?;
                chosen.push((li, part.clusters().to_vec()));
            }
            remaining.retain(|li| !split.quantize.contains(li));

            let post_share_loss = ctx.calib_loss(&net)?;
            let stats = train(&mut net, train_set, &config.retrain, ctx.retrain_seed(round))?;
            let post_retrain_loss = ctx.calib_loss(&net)?;
            let (eval_loss, eval_accuracy) = ctx.eval(&net)?;

            let cluster_losses: Vec<ClusterLoss> = losses
                .iter()
                .flat_map(|&(li, eq)| {
                    part.clusters().iter().map(move |&c| ClusterLoss { layer: li, cluster: c, eq })
                })
                .collect();

            state.iteration += 1;
            let report = QuantReport {
                round,
                phase,
                cluster_losses,
                chosen,
                pre_quant_loss: base,
                post_share_loss,
                post_retrain_loss,
                train_loss: stats.last().map_or(post_retrain_loss, |s| s.loss),
                train_accuracy: stats.last().map_or(0.0, |s| s.accuracy),
                eval_loss,
                eval_accuracy,
                frozen_fraction: frozen_fraction(&net),
            };
            hook(&net, &state, &report)?;
            reports.push(report);
        }
    }

    Ok(QuantOutcome { network: net, state, reports })
}

fn sse_to_value(weights: &[f32], assignment: &Assignment, cluster: usize, value: f32) -> f64 {
    weights
        .iter()
        .zip(assignment)
        .filter(|(_, &a)| a as usize == cluster)
        .map(|(&w, _)| {
            let d = w as f64 - value as f64;
            d * d
        })
        .sum()
}

/// Values the given part would be shared at right now: the members' current
/// means (or exactly zero for a zero-heart).
fn share_targets(
    net: &Network,
    state: &QuantState,
    li: usize,
    part: LayerPart,
    zero_heart: bool,
) -> Vec<(usize, f32)> {
    let lq = &state.layers[&li];
    let (w, _, _) = net.layers[li].params().expect("weighted");
    part.clusters()
        .iter()
        .map(|&c| {
            if part == LayerPart::Heart && zero_heart {
                return (c, 0.0f32);
            }
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for (i, &a) in lq.assignment.iter().enumerate() {
                if a as usize == c {
                    sum += w.data[i] as f64;
                    n += 1;
                }
            }
            let v = if n == 0 { lq.codebook.centroids[c] } else { (sum / n as f64) as f32 };
            (c, v)
        })
        .collect()
}

/// Writes refreshed centroid values into the codebook, re-sorting (with
/// ids remapped) if the refresh broke the ascending order.
fn apply_share_targets(state: &mut QuantState, li: usize, targets: &[(usize, f32)]) -> Result<()> {
    let lq = state.layers.get_mut(&li).expect("present");
    let mut centroids = lq.codebook.centroids.clone();
    for &(c, v) in targets {
        centroids[c] = v;
    }
    let sorted_ok = centroids.windows(2).all(|w| (w[1] as f64 - w[0] as f64) > CENTROID_GAP);
    if sorted_ok {
        lq.codebook.centroids = centroids;
        return Ok(());
    }
    let k = centroids.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).unwrap());
    let mut sorted: Vec<f32> = order.iter().map(|&i| centroids[i]).collect();
    for i in 1..k {
        while (sorted[i] as f64 - sorted[i - 1] as f64) <= CENTROID_GAP {
            sorted[i] = next_up(sorted[i]);
        }
    }
    let mut remap = vec![0u32; k];
    for (new_id, &old_id) in order.iter().enumerate() {
        remap[old_id] = new_id as u32;
    }
    let frozen: Vec<bool> = order.iter().map(|&i| lq.codebook.frozen[i]).collect();
    lq.codebook = Codebook::new(sorted, frozen)?;
    for a in &mut lq.assignment {
        *a = remap[*a as usize];
    }
    Ok(())
}

/// Dispatches on `config.mode`.
pub fn run_quantization(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
) -> Result<QuantOutcome> {
    run_quantization_with(net, train_set, eval_set, config, &mut |_, _, _| Ok(()))
}

pub fn run_quantization_with(
    net: Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &QuantConfig,
    hook: &mut RoundHook,
) -> Result<QuantOutcome> {
    match config.mode {
        QuantMode::Slq => run_slq_with(net, train_set, eval_set, config, hook),
        QuantMode::Eslq => run_eslq_with(net, train_set, eval_set, config, hook),
        QuantMode::Mlq => run_mlq_with(net, train_set, eval_set, config, hook),
    }
}

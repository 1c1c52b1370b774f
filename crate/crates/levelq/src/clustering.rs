//! Layer-wise 1-D k-means over weight values, centroid initialization modes,
//! and the type-constrained variant whose centroids are pulled toward
//! "oriented type" targets (t-centroids) by an L1 penalty.

use crate::error::{LqError, Result};

/// Minimum gap between adjacent codebook centroids.
pub const CENTROID_GAP: f64 = 1e-12;

/// Default convergence tolerance on centroid movement.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Default Lloyd iteration cap.
pub const DEFAULT_MAX_ITER: usize = 300;

/// Per-layer ordered centroid list with per-centroid frozen flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<f32>,
    pub frozen: Vec<bool>,
}

impl Codebook {
    /// Builds a codebook, validating the sorted-distinct invariant.
    pub fn new(centroids: Vec<f32>, frozen: Vec<bool>) -> Result<Self> {
        if centroids.len() != frozen.len() {
            return Err(LqError::argument("centroid/frozen length mismatch"));
        }
        if centroids.is_empty() {
            return Err(LqError::argument("codebook must not be empty"));
        }
        for w in centroids.windows(2) {
            if (w[1] as f64 - w[0] as f64) <= CENTROID_GAP {
                return Err(LqError::argument(format!(
                    "centroids must be ascending and distinct: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { centroids, frozen })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn unfrozen_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| !self.frozen[i]).collect()
    }

    /// Index of the nearest centroid; ties resolve to the lower index.
    pub fn nearest(&self, value: f32) -> usize {
        nearest_index_f64(&self.centroids.iter().map(|&c| c as f64).collect::<Vec<_>>(), value as f64)
    }
}

/// Cluster index per weight element, in weight order.
pub type Assignment = Vec<u32>;

/// Centroid initialization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Evenly spaced over `[min(w), max(w)]`.
    Linear,
    /// Symmetric halving ladder `±max|w| * 0.5^j`, plus 0 when k is odd.
    Exponential,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Linear => "linear",
            InitMode::Exponential => "exponential",
        }
    }
}

/// Oriented-type family a centroid can be constrained toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TCentroidKind {
    /// Nearest of `{0} ∪ {±2^z}`, ties toward smaller magnitude.
    PowerOfTwoOrZero,
    /// Rounded to two significant decimal figures.
    Scientific2Sig,
}

/// Type constraint configuration: a target family plus the L1 weight β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TCentroidSpec {
    pub kind: TCentroidKind,
    pub beta: f32,
}

impl TCentroidSpec {
    pub fn new(kind: TCentroidKind, beta: f32) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(LqError::argument("beta must be non-negative"));
        }
        Ok(Self { kind, beta })
    }
}

/// An L1 pull of one centroid toward a fixed target value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidConstraint {
    pub target: f32,
    pub beta: f32,
}

/// Result of a Lloyd run. `history` holds the objective after every
/// iteration: within-cluster SSE for plain k-means, the penalized
/// objective for the constrained variant.
#[derive(Debug, Clone)]
pub struct KmeansOutput {
    pub codebook: Codebook,
    pub assignment: Assignment,
    pub history: Vec<f64>,
    pub iterations: usize,
    /// `slot_order[i]` is the init/constraint slot that became centroid `i`
    /// of the sorted codebook.
    pub slot_order: Vec<usize>,
}

fn count_distinct(sorted: &[f32]) -> usize {
    let mut n = if sorted.is_empty() { 0 } else { 1 };
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            n += 1;
        }
    }
    n
}

/// Initial centroid positions for `k` clusters over `weights`.
pub fn init_centroids(weights: &[f32], k: usize, mode: InitMode) -> Result<Vec<f32>> {
    if weights.is_empty() {
        return Err(LqError::argument("cannot initialize centroids over no weights"));
    }
    if k < 2 {
        return Err(LqError::argument("centroid count must be at least 2"));
    }
    let mut sorted: Vec<f32> = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let distinct = count_distinct(&sorted);
    if k > distinct {
        return Err(LqError::argument(format!(
            "requested {} centroids but only {} distinct weight values",
            k, distinct
        )));
    }
    let lo = sorted[0] as f64;
    let hi = sorted[sorted.len() - 1] as f64;

    let mut vals: Vec<f64> = match mode {
        InitMode::Linear => (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect(),
        InitMode::Exponential => {
            let peak = weights.iter().fold(0.0f64, |m, &w| m.max((w as f64).abs()));
            let pairs = k / 2;
            let mut v = Vec::with_capacity(k);
            for j in 0..pairs {
                let mag = peak * 0.5f64.powi(j as i32);
                v.push(-mag);
                v.push(mag);
            }
            if k % 2 == 1 {
                v.push(0.0);
            }
            v
        }
    };

    for v in &mut vals {
        *v = v.clamp(lo, hi);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    Ok(vals.into_iter().map(|v| v as f32).collect())
}

/// Nearest index by linear scan; ties go to the lower index. Constrained
/// centroids can cross each other mid-run, so no sortedness is assumed.
fn nearest_index_f64(centroids: &[f64], value: f64) -> usize {
    debug_assert!(!centroids.is_empty());
    let mut best = 0;
    let mut best_d = (value - centroids[0]).abs();
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        let d = (value - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

struct LloydState {
    centroids: Vec<f64>,
    assignment: Vec<u32>,
    sizes: Vec<usize>,
}

impl LloydState {
    fn assign(&mut self, weights: &[f32]) {
        self.sizes = vec![0; self.centroids.len()];
        for (i, &w) in weights.iter().enumerate() {
            let idx = nearest_index_f64(&self.centroids, w as f64);
            self.assignment[i] = idx as u32;
            self.sizes[idx] += 1;
        }
    }

    /// Moves an empty cluster's centroid onto the weight farthest from its
    /// assigned centroid (donor cluster must keep at least one member).
    fn reseed_empty(&mut self, weights: &[f32], reseedable: impl Fn(usize) -> bool) {
        for empty in 0..self.centroids.len() {
            if self.sizes[empty] != 0 || !reseedable(empty) {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for (i, &w) in weights.iter().enumerate() {
                let cur = self.assignment[i] as usize;
                if self.sizes[cur] < 2 {
                    continue;
                }
                let d = (w as f64 - self.centroids[cur]).abs();
                let better = match best {
                    None => true,
                    Some((bd, _)) => d > bd,
                };
                if better {
                    best = Some((d, i));
                }
            }
            if let Some((_, i)) = best {
                let prev = self.assignment[i] as usize;
                self.sizes[prev] -= 1;
                self.sizes[empty] += 1;
                self.assignment[i] = empty as u32;
                self.centroids[empty] = weights[i] as f64;
            }
        }
    }

    fn sse(&self, weights: &[f32]) -> f64 {
        weights
            .iter()
            .zip(&self.assignment)
            .map(|(&w, &a)| {
                let d = w as f64 - self.centroids[a as usize];
                d * d
            })
            .sum()
    }
}

fn validate_init(weights: &[f32], init: &[f32]) -> Result<()> {
    if weights.is_empty() {
        return Err(LqError::argument("cannot cluster an empty weight set"));
    }
    if init.is_empty() {
        return Err(LqError::argument("initial centroid list is empty"));
    }
    for w in init.windows(2) {
        if w[1] <= w[0] {
            return Err(LqError::argument("initial centroids must be sorted and distinct"));
        }
    }
    Ok(())
}

/// Finalizes a Lloyd state into a sorted, distinct `Codebook` plus an
/// assignment recomputed against the final f32 centroid values.
fn finalize(state: LloydState, weights: &[f32], history: Vec<f64>, iterations: usize) -> Result<KmeansOutput> {
    let k = state.centroids.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| state.centroids[a].partial_cmp(&state.centroids[b]).unwrap());

    let mut centroids: Vec<f32> = order.iter().map(|&i| state.centroids[i] as f32).collect();
    // Collapsed centroids only arise in degenerate inputs; separate them by
    // ulp steps so the codebook invariant holds, then re-assign.
    for i in 1..centroids.len() {
        while (centroids[i] as f64 - centroids[i - 1] as f64) <= CENTROID_GAP {
            centroids[i] = next_up(centroids[i]);
        }
    }
    let cb = Codebook::new(centroids, vec![false; k])?;
    let assignment: Assignment = weights.iter().map(|&w| cb.nearest(w) as u32).collect();
    Ok(KmeansOutput { codebook: cb, assignment, history, iterations, slot_order: order })
}

fn next_up(v: f32) -> f32 {
    if v == f32::MAX || v.is_nan() {
        return v;
    }
    let bits = v.to_bits();
    f32::from_bits(if v >= 0.0 { bits + 1 } else { bits - 1 })
}

/// Plain Lloyd k-means over scalar weights.
///
/// Assignment breaks ties toward the lower centroid index; empty clusters are
/// re-seeded at the weight farthest from its nearest centroid. Stops when the
/// largest centroid movement drops below `tol` or after `max_iter` sweeps.
pub fn kmeans(weights: &[f32], init: &[f32], max_iter: usize, tol: f64) -> Result<KmeansOutput> {
    constrained_kmeans(weights, init, &vec![None; init.len()], max_iter, tol)
}

/// Lloyd k-means where selected centroids minimize the L1-penalized objective
///
/// ```text
/// (1/n) * Σ_j Σ_{w ∈ cluster j} (w - c_j)^2  +  Σ_j β_j |c_j - t_j|
/// ```
///
/// Unconstrained centroids use the plain cluster mean. The objective is
/// non-increasing across iterations.
pub fn constrained_kmeans(
    weights: &[f32],
    init: &[f32],
    specs: &[Option<CentroidConstraint>],
    max_iter: usize,
    tol: f64,
) -> Result<KmeansOutput> {
    validate_init(weights, init)?;
    if specs.len() != init.len() {
        return Err(LqError::argument("one constraint slot per centroid required"));
    }
    for c in specs.iter().flatten() {
        if !(c.beta >= 0.0) {
            return Err(LqError::argument("constraint beta must be non-negative"));
        }
    }

    let n_total = weights.len();
    let mut state = LloydState {
        centroids: init.iter().map(|&c| c as f64).collect(),
        assignment: vec![0; n_total],
        sizes: Vec::new(),
    };
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        state.assign(weights);
        // Constrained empties park at their target (the exact minimizer of
        // their remaining objective term); unconstrained empties re-seed.
        for (j, spec) in specs.iter().enumerate() {
            if state.sizes[j] == 0 {
                if let Some(c) = spec {
                    state.centroids[j] = c.target as f64;
                }
            }
        }
        state.reseed_empty(weights, |j| specs[j].is_none());

        let mut moved = 0.0f64;
        let mut sums = vec![0.0f64; state.centroids.len()];
        for (i, &w) in weights.iter().enumerate() {
            sums[state.assignment[i] as usize] += w as f64;
        }
        for j in 0..state.centroids.len() {
            if state.sizes[j] == 0 {
                continue;
            }
            let mean = sums[j] / state.sizes[j] as f64;
            let new_c = match specs[j] {
                None => mean,
                Some(c) => soft_threshold_update(mean, state.sizes[j], c.target as f64, c.beta as f64, n_total),
            };
            moved = moved.max((new_c - state.centroids[j]).abs());
            state.centroids[j] = new_c;
        }

        iterations += 1;
        history.push(objective(weights, &state, specs, n_total));
        if moved < tol {
            break;
        }
    }

    finalize(state, weights, history, iterations)
}

/// Plain runs report raw within-cluster SSE; constrained runs report the
/// penalized objective with its 1/n weighting on the SSE term.
fn objective(weights: &[f32], state: &LloydState, specs: &[Option<CentroidConstraint>], n_total: usize) -> f64 {
    if specs.iter().all(Option::is_none) {
        return state.sse(weights);
    }
    let mut obj = state.sse(weights) / n_total as f64;
    for (j, spec) in specs.iter().enumerate() {
        if let Some(c) = spec {
            obj += c.beta as f64 * (state.centroids[j] - c.target as f64).abs();
        }
    }
    obj
}

fn soft_threshold_update(mean: f64, n: usize, target: f64, beta: f64, n_total: usize) -> f64 {
    let shift = beta * n_total as f64 / (2.0 * n as f64);
    let delta = mean - target;
    if delta.abs() <= shift {
        target
    } else {
        mean - delta.signum() * shift
    }
}

/// Exact minimizer over `c` of
/// `(1/n_total) * Σ (w - c)^2 + β |c - target|` for one cluster.
///
/// Soft-threshold form: with `m` the cluster mean and `n` its size, the
/// minimizer is `target` when `|m - target| <= β n_total / (2n)` and
/// `m - sign(m - target) * β n_total / (2n)` otherwise.
pub fn centroid_update_l1(cluster_values: &[f32], target: f64, beta: f64, n_total: usize) -> Result<f64> {
    if cluster_values.is_empty() {
        return Err(LqError::argument("cluster is empty"));
    }
    if n_total < cluster_values.len() {
        return Err(LqError::argument("n_total must cover the cluster"));
    }
    if !(beta >= 0.0) {
        return Err(LqError::argument("beta must be non-negative"));
    }
    let n = cluster_values.len();
    let mean = cluster_values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    Ok(soft_threshold_update(mean, n, target, beta, n_total))
}

/// Nearest value of the oriented type to `value`.
pub fn t_centroid(value: f32, kind: TCentroidKind) -> f32 {
    match kind {
        TCentroidKind::PowerOfTwoOrZero => nearest_power_of_two_or_zero(value),
        TCentroidKind::Scientific2Sig => round_2sig(value),
    }
}

fn nearest_power_of_two_or_zero(value: f32) -> f32 {
    if value == 0.0 || !value.is_finite() {
        return 0.0;
    }
    let v = (value as f64).abs();
    let z = v.log2().floor() as i32;
    // Candidates bracketing v; 2^(z+1) <= 2v always holds, so both respect
    // the |2^z| <= 2|value| bound.
    let lo = 2.0f64.powi(z);
    let hi = 2.0f64.powi(z + 1);
    let pick = if (v - lo).abs() <= (hi - v).abs() { lo } else { hi };
    (value.signum() as f64 * pick) as f32
}

fn round_2sig(value: f32) -> f32 {
    if value == 0.0 || !value.is_finite() {
        return 0.0;
    }
    let v = value as f64;
    let exp = v.abs().log10().floor();
    let scale = 10.0f64.powf(exp - 1.0);
    ((v / scale).round() * scale) as f32
}

/// True when `value` is exactly zero or an exact power of two.
pub fn is_power_of_two_or_zero(value: f32) -> bool {
    if value == 0.0 {
        return true;
    }
    if !value.is_finite() {
        return false;
    }
    let m = value.abs() as f64;
    let z = m.log2().round() as i32;
    m == 2.0f64.powi(z)
}

/// True when `value` survives rounding to two significant decimal figures.
pub fn is_2sig(value: f32) -> bool {
    value == round_2sig(value)
}

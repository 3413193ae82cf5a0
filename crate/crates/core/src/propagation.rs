//! Stateless kernels for semantic/instance similarity, distribution
//! alignment and the unfold/aggregate label-propagation operators.
//!
//! Everything here is a pure function of its inputs and works in `f64`.
//! [`AlignmentState`] is the only stateful value and it is updated by
//! returning a new copy.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Lower clamp applied to predictions before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Floor applied to the running average before dividing by it.
pub const ALIGN_FLOOR: f64 = 1e-8;

fn check_simplex(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::input(format!("{what}: empty distribution")));
    }
    if let Some(v) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::input(format!("{what}: invalid entry {v}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::input(format!("{what}: entries sum to {sum}, not 1")));
    }
    Ok(())
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
    }
    sum
}

/// Probability vector over the `L` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDistribution(Vec<f64>);

/// Probability vector over the `K` entries of the labeled memory buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDistribution(Vec<f64>);

/// A semantic distribution copied out to buffer dimension. Not a simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedDistribution(Vec<f64>);

/// An instance distribution summed back to class dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDistribution(Vec<f64>);

macro_rules! simplex_type {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(probs: Vec<f64>) -> Result<Self> {
                check_simplex(&probs, $what)?;
                Ok(Self(probs))
            }

            pub fn uniform(len: usize) -> Self {
                Self(vec![1.0 / len as f64; len])
            }

            pub fn probs(&self) -> &[f64] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn entropy(&self) -> f64 {
                entropy(&self.0)
            }

            /// Largest probability and its first index.
            pub fn max(&self) -> (usize, f64) {
                argmax(&self.0)
            }
        }
    };
}

simplex_type!(SemanticDistribution, "semantic distribution");
simplex_type!(InstanceDistribution, "instance distribution");

impl UnfoldedDistribution {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Multiplies every entry by `c`. Used to check rescaling invariance.
    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

impl AggregatedDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// First index of the maximum entry.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
}

/// Max-subtracted softmax of `logits` divided by `temperature`.
pub(crate) fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    normalize_in_place(&mut out);
    out
}

/// Class probabilities from classifier logits.
pub fn semantic_similarity(logits: &[f64]) -> Result<SemanticDistribution> {
    if logits.len() < 2 {
        return Err(Error::input(format!(
            "semantic similarity needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::input("non-finite logit"));
    }
    Ok(SemanticDistribution(softmax_with_temperature(logits, 1.0)))
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarities between `z` and every buffer row.
///
/// `buffer_features` is a row-major `K x D` matrix.
pub fn cosine_similarities(z: &[f64], buffer_features: &[f64]) -> Result<Vec<f64>> {
    let dim = z.len();
    if dim == 0 || buffer_features.is_empty() || !buffer_features.len().is_multiple_of(dim) {
        return Err(Error::input(format!(
            "buffer of {} values does not hold rows of width {dim}",
            buffer_features.len()
        )));
    }
    let zn = l2_norm(z);
    if zn == 0.0 || !zn.is_finite() {
        return Err(Error::input("embedding has zero or non-finite norm"));
    }
    buffer_features
        .chunks_exact(dim)
        .map(|row| {
            let rn = l2_norm(row);
            if rn == 0.0 || !rn.is_finite() {
                return Err(Error::input("buffer row has zero or non-finite norm"));
            }
            let dot: f64 = z.iter().zip(row).map(|(a, b)| a * b).sum();
            Ok(dot / (zn * rn))
        })
        .collect()
}

/// Temperature-scaled softmax over cosine similarities to the buffer rows.
pub fn instance_similarity(
    z: &[f64],
    buffer_features: &[f64],
    temperature: f64,
) -> Result<InstanceDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let sims = cosine_similarities(z, buffer_features)?;
    Ok(InstanceDistribution(softmax_with_temperature(
        &sims,
        temperature,
    )))
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&c| c >= num_classes) {
        Some(c) => Err(Error::input(format!(
            "buffer label {c} outside [0, {num_classes})"
        ))),
        None => Ok(()),
    }
}

/// Copies each class probability onto the buffer entries of that class.
pub fn unfold(p: &SemanticDistribution, buffer_labels: &[usize]) -> Result<UnfoldedDistribution> {
    check_labels(buffer_labels, p.len())?;
    Ok(UnfoldedDistribution(
        buffer_labels.iter().map(|&c| p.0[c]).collect(),
    ))
}

/// Reweights `q` by `p_unfold` and renormalizes.
///
/// Returns [`Error::DegenerateCalibration`] when the two have disjoint
/// support; the caller decides on a fallback.
pub fn scale_calibrate(
    q: &InstanceDistribution,
    p_unfold: &UnfoldedDistribution,
) -> Result<InstanceDistribution> {
    if q.len() != p_unfold.len() {
        return Err(Error::input(format!(
            "q has {} entries but p_unfold has {}",
            q.len(),
            p_unfold.len()
        )));
    }
    let mut out: Vec<f64> = q.0.iter().zip(&p_unfold.0).map(|(a, b)| a * b).collect();
    let denom = normalize_in_place(&mut out);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::DegenerateCalibration);
    }
    Ok(InstanceDistribution(out))
}

/// Sums instance probabilities that share a class label.
pub fn aggregate(
    q: &InstanceDistribution,
    buffer_labels: &[usize],
    num_classes: usize,
) -> Result<AggregatedDistribution> {
    aggregate_weights(&q.0, buffer_labels, num_classes).map(AggregatedDistribution)
}

/// [`aggregate`] over arbitrary nonnegative weights (e.g. an unfolded vector).
pub fn aggregate_weights(
    weights: &[f64],
    buffer_labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    if weights.len() != buffer_labels.len() {
        return Err(Error::input(format!(
            "{} weights but {} buffer labels",
            weights.len(),
            buffer_labels.len()
        )));
    }
    check_labels(buffer_labels, num_classes)?;
    let mut out = vec![0.0; num_classes];
    for (&w, &c) in weights.iter().zip(buffer_labels) {
        out[c] += w;
    }
    Ok(out)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Convex combination `alpha * p + (1 - alpha) * q_agg`.
pub fn smooth_calibrate(
    p: &SemanticDistribution,
    q_agg: &AggregatedDistribution,
    alpha: f64,
) -> Result<SemanticDistribution> {
    check_alpha(alpha)?;
    if p.len() != q_agg.len() {
        return Err(Error::input(format!(
            "p has {} classes but q_agg has {}",
            p.len(),
            q_agg.len()
        )));
    }
    Ok(SemanticDistribution(
        p.0.iter()
            .zip(&q_agg.0)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect(),
    ))
}

/// Scaling applied on the semantic side: `Normalize(p * q_agg)`.
///
/// Only used by the propagation-strategy ablation.
pub fn scale_semantic(
    p: &SemanticDistribution,
    q_agg: &AggregatedDistribution,
) -> Result<SemanticDistribution> {
    if p.len() != q_agg.len() {
        return Err(Error::input("p and q_agg differ in length"));
    }
    let mut out: Vec<f64> = p.0.iter().zip(&q_agg.0).map(|(a, b)| a * b).collect();
    let denom = normalize_in_place(&mut out);
    if !(denom > 0.0) {
        return Err(Error::DegenerateCalibration);
    }
    Ok(SemanticDistribution(out))
}

/// Smoothing applied on the instance side:
/// `alpha * q + (1 - alpha) * Normalize(p_unfold)`.
///
/// Only used by the propagation-strategy ablation.
pub fn smooth_instance(
    q: &InstanceDistribution,
    p_unfold: &UnfoldedDistribution,
    alpha: f64,
) -> Result<InstanceDistribution> {
    check_alpha(alpha)?;
    if q.len() != p_unfold.len() {
        return Err(Error::input("q and p_unfold differ in length"));
    }
    let mut target = p_unfold.0.clone();
    if !(normalize_in_place(&mut target) > 0.0) {
        return Err(Error::DegenerateCalibration);
    }
    Ok(InstanceDistribution(
        q.0.iter()
            .zip(&target)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect(),
    ))
}

/// Moving window of recent semantic distributions used for alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentState {
    window: VecDeque<Vec<f64>>,
    running_avg: Vec<f64>,
    capacity: usize,
    num_classes: usize,
}

impl AlignmentState {
    pub fn new(num_classes: usize, capacity: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("alignment needs at least 2 classes"));
        }
        if capacity == 0 {
            return Err(Error::config("alignment window must hold at least one step"));
        }
        Ok(Self {
            window: VecDeque::with_capacity(capacity),
            running_avg: vec![1.0 / num_classes as f64; num_classes],
            capacity,
            num_classes,
        })
    }

    pub fn running_avg(&self) -> &[f64] {
        &self.running_avg
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn window(&self) -> impl Iterator<Item = &[f64]> {
        self.window.iter().map(Vec::as_slice)
    }

    /// `Normalize(p / running_avg)` against the current average.
    pub fn align(&self, p: &SemanticDistribution) -> Result<SemanticDistribution> {
        if p.len() != self.num_classes {
            return Err(Error::input(format!(
                "alignment state has {} classes, p has {}",
                self.num_classes,
                p.len()
            )));
        }
        let mut out: Vec<f64> = p
            .0
            .iter()
            .zip(&self.running_avg)
            .map(|(v, avg)| v / avg.max(ALIGN_FLOOR))
            .collect();
        normalize_in_place(&mut out);
        Ok(SemanticDistribution(out))
    }

    /// Returns a copy with `entry` appended, evicting the oldest entry when
    /// the window is full.
    pub fn pushed(&self, entry: &[f64]) -> Result<Self> {
        if entry.len() != self.num_classes {
            return Err(Error::input("alignment entry has the wrong class count"));
        }
        let mut next = self.clone();
        if next.window.len() == next.capacity {
            next.window.pop_front();
        }
        next.window.push_back(entry.to_vec());
        next.recompute();
        Ok(next)
    }

    fn recompute(&mut self) {
        let n = self.window.len() as f64;
        self.running_avg.iter_mut().for_each(|v| *v = 0.0);
        for row in &self.window {
            for (acc, v) in self.running_avg.iter_mut().zip(row) {
                *acc += v;
            }
        }
        self.running_avg.iter_mut().for_each(|v| *v /= n);
    }

    /// Rebuilds a state from a stored window, recomputing the average.
    pub fn from_window(num_classes: usize, capacity: usize, window: Vec<Vec<f64>>) -> Result<Self> {
        let mut state = Self::new(num_classes, capacity)?;
        if window.len() > capacity {
            return Err(Error::input("alignment window exceeds capacity"));
        }
        if window.iter().any(|w| w.len() != num_classes) {
            return Err(Error::input("alignment window entry has the wrong class count"));
        }
        if !window.is_empty() {
            state.window = window.into();
            state.recompute();
        }
        Ok(state)
    }
}

/// Aligns `p` against the state before this call and returns the state with
/// the raw `p` appended.
pub fn distribution_align(
    p: &SemanticDistribution,
    state: &AlignmentState,
) -> Result<(SemanticDistribution, AlignmentState)> {
    let aligned = state.align(p)?;
    let next = state.pushed(&p.0)?;
    Ok((aligned, next))
}

/// Aligns a batch against the state before this call, then appends the batch
/// mean of the raw distributions as a single window entry.
pub fn distribution_align_batch(
    batch: &[SemanticDistribution],
    state: &AlignmentState,
) -> Result<(Vec<SemanticDistribution>, AlignmentState)> {
    if batch.is_empty() {
        return Ok((Vec::new(), state.clone()));
    }
    let aligned = batch
        .iter()
        .map(|p| state.align(p))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; state.num_classes];
    for p in batch {
        for (m, v) in mean.iter_mut().zip(&p.0) {
            *m += v;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok((aligned, state.pushed(&mean)?))
}

/// `-sum target_i * ln(max(pred_i, 1e-12))`.
pub fn soft_cross_entropy(target: &[f64], prediction: &[f64]) -> Result<f64> {
    if target.len() != prediction.len() {
        return Err(Error::input(format!(
            "target has {} entries, prediction {}",
            target.len(),
            prediction.len()
        )));
    }
    Ok(target
        .iter()
        .zip(prediction)
        .map(|(t, p)| -t * p.max(LOG_CLAMP).ln())
        .sum())
}

/// `max_i p_hat[b][i] > tau` for each sample.
pub fn confidence_mask(p_hat_batch: &[SemanticDistribution], tau: f64) -> Vec<bool> {
    p_hat_batch.iter().map(|p| p.max().1 > tau).collect()
}

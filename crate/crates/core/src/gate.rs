//! Swap gate: scores the EM samples drawn into a mini-batch and picks the
//! subset to swap out for storage samples.
//!
//! Scores lie in `[0, 1]`; a higher score means "keep". The gate always
//! selects the `round(r * n)` lowest-scoring samples of the batch, which
//! caps the number of storage reads per mini-batch at a fixed budget.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability vector's sum from one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("degenerate class distribution: {0}")]
    DegenerateDistribution(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid gate policy: {0}")]
    InvalidPolicy(String),
}

/// Training-time signals for one EM sample in a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInputs<T> {
    pub sample_id: u64,
    pub slot_index: usize,
    pub predicted_label: u32,
    pub true_label: u32,
    pub class_probs: Vec<T>,
}

impl<T: Scalar> ScoreInputs<T> {
    /// Builds inputs whose prediction is the argmax of `class_probs`, lowest index on ties.
    pub fn from_probs(sample_id: u64, slot_index: usize, true_label: u32, class_probs: Vec<T>) -> Self {
        ScoreInputs {
            sample_id,
            slot_index,
            predicted_label: argmax(&class_probs) as u32,
            true_label,
            class_probs,
        }
    }
}

/// Index of the largest element, first one on ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Round half to even.
pub fn swap_count(ratio: f64, batch: usize) -> usize {
    ((ratio * batch as f64).round_ties_even() as usize).min(batch)
}

/// Shannon entropy in nats, with probabilities clamped to `[PROB_FLOOR, 1]`
/// inside the log.
pub fn entropy<T: Scalar>(probs: &[T]) -> T {
    let floor = T::of(PROB_FLOOR);
    probs
        .iter()
        .map(|&p| {
            let q = p.max(floor).min(T::one());
            -p * q.ln()
        })
        .sum()
}

/// Keep-score of one sample.
///
/// A correct prediction scores its normalized entropy, so confident correct
/// samples (score near 0) are swapped first. An incorrect prediction scores
/// one minus its normalized entropy, so confident mistakes are kept.
pub fn score_entropy<T: Scalar>(inputs: &ScoreInputs<T>, num_classes: usize) -> Result<T, GateError> {
    if num_classes < 2 {
        return Err(GateError::DegenerateDistribution(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let probs = &inputs.class_probs;
    if probs.len() != num_classes {
        return Err(GateError::DegenerateDistribution(format!(
            "{} probabilities for {num_classes} classes",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| p.is_nan() || **p < T::zero()) {
        return Err(GateError::DegenerateDistribution(format!("invalid probability {p}")));
    }
    let sum: T = probs.iter().copied().sum();
    if (sum.as_f64() - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(GateError::DegenerateDistribution(format!("probabilities sum to {sum}")));
    }
    let h = entropy(probs);
    let u = T::of(num_classes as f64).ln();
    let raw = if inputs.predicted_label == inputs.true_label {
        h
    } else {
        u - h
    };
    Ok((raw / u).max(T::zero()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Entropy,
    /// Random for the first half of a bundle's passes, Entropy for the rest.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatePolicy {
    pub kind: PolicyKind,
    pub swap_ratio: f64,
    pub pass_index: usize,
    pub total_passes: usize,
}

impl GatePolicy {
    pub fn new(kind: PolicyKind, swap_ratio: f64) -> Self {
        GatePolicy {
            kind,
            swap_ratio,
            pass_index: 0,
            total_passes: 1,
        }
    }

    pub fn at_pass(self, pass_index: usize, total_passes: usize) -> Self {
        GatePolicy {
            pass_index,
            total_passes,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if !(0.0..=1.0).contains(&self.swap_ratio) {
            return Err(GateError::InvalidPolicy(format!(
                "swap_ratio {} outside [0, 1]",
                self.swap_ratio
            )));
        }
        if self.kind == PolicyKind::Dynamic && self.pass_index >= self.total_passes {
            return Err(GateError::InvalidPolicy(format!(
                "pass {} of {}",
                self.pass_index, self.total_passes
            )));
        }
        Ok(())
    }

    /// The concrete scoring rule in effect for this pass. The extra pass of
    /// an odd budget goes to Random.
    pub fn effective_kind(&self) -> PolicyKind {
        match self.kind {
            PolicyKind::Dynamic if self.pass_index < self.total_passes.div_ceil(2) => PolicyKind::Random,
            PolicyKind::Dynamic => PolicyKind::Entropy,
            k => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision<T> {
    /// `(slot_index, sample_id)` of every sample chosen for replacement.
    pub swap_out: Vec<(usize, u64)>,
    pub scores: BTreeMap<u64, T>,
}

/// Scores `batch` under `policy` and selects the samples to swap out.
pub fn gate_select<T: Scalar, R: Rng + ?Sized>(
    batch: &[ScoreInputs<T>],
    policy: &GatePolicy,
    rng: &mut R,
) -> Result<GateDecision<T>, GateError> {
    if batch.is_empty() {
        return Err(GateError::EmptyBatch);
    }
    policy.validate()?;
    let n = batch.len();
    let k = swap_count(policy.swap_ratio, n);
    let scores: Vec<T> = match policy.effective_kind() {
        PolicyKind::Random => {
            let mut s = vec![T::one(); n];
            for i in index::sample(rng, n, k) {
                s[i] = T::zero();
            }
            s
        }
        PolicyKind::Entropy => batch
            .iter()
            .map(|inp| score_entropy(inp, inp.class_probs.len()))
            .collect::<Result<_, _>>()?,
        PolicyKind::Dynamic => unreachable!("resolved by effective_kind"),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(batch[a].sample_id.cmp(&batch[b].sample_id))
    });
    Ok(GateDecision {
        swap_out: order[..k]
            .iter()
            .map(|&i| (batch[i].slot_index, batch[i].sample_id))
            .collect(),
        scores: batch.iter().map(|b| b.sample_id).zip(scores).collect(),
    })
}

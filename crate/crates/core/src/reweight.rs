//! Topic weight state machine.
//!
//! Training is cut into fixed intervals. During an interval every sample's
//! raw loss is recorded against each of its topic labels; at the interval
//! boundary the per-topic mean losses are compared with their average and
//! the topic weights are moved up or down depending on the current stage.
//! Weights produced at the end of interval `t` scale sample losses during
//! interval `t + 1`.
//!
//! Stage 1 pushes weight toward topics whose loss is above average and snaps
//! everything else back to 1. Stage 2 reverses the pressure: topics that keep
//! a high loss are pushed down toward `gamma`, low-loss topics are pushed up
//! toward `beta`.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReweightError {
    #[error("topic label is empty after trimming whitespace")]
    EmptyLabel,
    #[error("invalid reweighter config: {0}")]
    InvalidConfig(String),
    #[error("sample {sample_id:?} has no topic labels")]
    NoLabels { sample_id: String },
    #[error("sample {sample_id:?} has non-finite loss {loss}")]
    NonFiniteLoss { sample_id: String, loss: f64 },
    #[error("interval has no recorded samples")]
    EmptyInterval,
    #[error("label loss for {label:?} is not finite ({loss})")]
    NonFiniteLabelLoss { label: String, loss: f64 },
    #[error("cannot average an empty set of label losses")]
    NoLabelLosses,
    #[error("stage {requested} requested for the interval ending at step {step}, but the schedule says {expected}")]
    StageMismatch {
        requested: Stage,
        expected: Stage,
        step: u64,
    },
}

/// A topic tag. Compared by exact, case-sensitive string equality after the
/// surrounding whitespace has been trimmed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicLabel(String);

impl TopicLabel {
    pub fn new(name: impl AsRef<str>) -> Result<Self, ReweightError> {
        let trimmed = name.as_ref().trim();
        if trimmed.is_empty() {
            return Err(ReweightError::EmptyLabel);
        }
        Ok(Self(trimmed.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for TopicLabel {
    type Error = ReweightError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<TopicLabel> for String {
    fn from(label: TopicLabel) -> Self {
        label.0
    }
}

impl Borrow<str> for TopicLabel {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// How the Stage-2 "at or below average" branch moves a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BelowAverageMode {
    /// `w + alpha * (L - avg)` with the signed, non-positive difference,
    /// clipped to `[gamma, beta]`. Low-loss topics drift down.
    Literal,
    /// `w + alpha * |L - avg|`, clipped at `beta`. Low-loss topics drift up.
    #[default]
    Magnitude,
}

impl fmt::Display for BelowAverageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BelowAverageMode::Literal => "literal",
            BelowAverageMode::Magnitude => "magnitude",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweighterConfig {
    /// Scaling factor applied to the loss gap.
    pub alpha: f64,
    /// Upper limit for individual weights and for the product multiplier.
    pub beta: f64,
    /// Lower limit for weights in Stage 2.
    pub gamma: f64,
    /// Number of training steps per interval.
    pub interval_steps: u64,
    /// First step that belongs to Stage 2.
    pub transition_step: u64,
    pub stage2_below_average_mode: BelowAverageMode,
}

impl Default for ReweighterConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            gamma: 0.1,
            interval_steps: 100,
            transition_step: 4000,
            stage2_below_average_mode: BelowAverageMode::Magnitude,
        }
    }
}

impl ReweighterConfig {
    /// Checks the bounds. `gamma == 1 == beta` is accepted: it pins every
    /// weight to 1, which turns the reweighter into a no-op.
    pub fn validate(&self) -> Result<(), ReweightError> {
        let bad = |msg: String| Err(ReweightError::InvalidConfig(msg));
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.beta.is_finite() && self.beta >= 1.0) {
            return bad(format!("beta must be finite and >= 1, got {}", self.beta));
        }
        if self.interval_steps == 0 {
            return bad("interval_steps must be at least 1".into());
        }
        if self.transition_step == 0 || !self.transition_step.is_multiple_of(self.interval_steps) {
            return bad(format!(
                "transition_step ({}) must be a positive multiple of interval_steps ({})",
                self.transition_step, self.interval_steps
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

/// Stage that governs the interval boundary at `step`.
pub fn stage_for_step(step: u64, config: &ReweighterConfig) -> Stage {
    if step < config.transition_step {
        Stage::Stage1
    } else {
        Stage::Stage2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelStats {
    pub loss_sum: f64,
    pub sample_count: u64,
}

/// Raw-loss totals per topic for the interval currently in progress.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntervalAccumulator {
    per_label: BTreeMap<TopicLabel, LabelStats>,
    steps_seen: u64,
}

impl IntervalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `raw_loss` once to every distinct label of the sample.
    pub fn record_sample(
        &mut self,
        sample_id: &str,
        labels: &[TopicLabel],
        raw_loss: f64,
    ) -> Result<(), ReweightError> {
        if labels.is_empty() {
            return Err(ReweightError::NoLabels {
                sample_id: sample_id.to_owned(),
            });
        }
        if !raw_loss.is_finite() {
            return Err(ReweightError::NonFiniteLoss {
                sample_id: sample_id.to_owned(),
                loss: raw_loss,
            });
        }
        let distinct: BTreeSet<&TopicLabel> = labels.iter().collect();
        for label in distinct {
            let stats = self.per_label.entry(label.clone()).or_default();
            stats.loss_sum += raw_loss;
            stats.sample_count += 1;
        }
        Ok(())
    }

    /// Marks the end of one training step inside the interval.
    pub fn end_step(&mut self) {
        self.steps_seen += 1;
    }

    pub fn steps_seen(&self) -> u64 {
        self.steps_seen
    }

    pub fn is_empty(&self) -> bool {
        self.per_label.is_empty()
    }

    pub fn stats(&self, label: &str) -> Option<LabelStats> {
        self.per_label.get(label).copied()
    }

    pub fn labels(&self) -> impl Iterator<Item = &TopicLabel> {
        self.per_label.keys()
    }

    /// Mean raw loss per label observed in this interval.
    pub fn label_losses(&self) -> Result<BTreeMap<TopicLabel, f64>, ReweightError> {
        if self.per_label.is_empty() {
            return Err(ReweightError::EmptyInterval);
        }
        self.per_label
            .iter()
            .map(|(label, stats)| {
                let loss = stats.loss_sum / stats.sample_count as f64;
                if loss.is_finite() {
                    Ok((label.clone(), loss))
                } else {
                    Err(ReweightError::NonFiniteLabelLoss {
                        label: label.to_string(),
                        loss,
                    })
                }
            })
            .collect()
    }

    pub fn clear(&mut self) {
        self.per_label.clear();
        self.steps_seen = 0;
    }
}

/// Unweighted mean over labels (not over samples). Labels are summed in
/// lexicographic order, which fixes the floating-point result.
pub fn average_label_loss(label_losses: &BTreeMap<TopicLabel, f64>) -> Result<f64, ReweightError> {
    if label_losses.is_empty() {
        return Err(ReweightError::NoLabelLosses);
    }
    let sum: f64 = label_losses.values().sum();
    Ok(sum / label_losses.len() as f64)
}

/// New weight for one label given its interval loss and the interval average.
/// Ties go to the "otherwise" branch in both stages.
pub fn updated_weight(
    previous: f64,
    label_loss: f64,
    average: f64,
    stage: Stage,
    config: &ReweighterConfig,
) -> f64 {
    let delta = label_loss - average;
    let above = label_loss > average;
    match stage {
        Stage::Stage1 => {
            if above {
                (previous + config.alpha * delta).min(config.beta)
            } else {
                1.0
            }
        }
        Stage::Stage2 => {
            if above {
                (previous - config.alpha * delta).max(config.gamma)
            } else {
                match config.stage2_below_average_mode {
                    BelowAverageMode::Magnitude => {
                        (previous + config.alpha * delta.abs()).min(config.beta)
                    }
                    BelowAverageMode::Literal => (previous + config.alpha * delta)
                        .min(config.beta)
                        .max(config.gamma),
                }
            }
        }
    }
}

/// Loss and resulting weight for one label in a finalized interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelOutcome {
    pub loss: f64,
    pub weight: f64,
}

/// One line of the weight trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalSummary {
    /// 1-based interval index.
    pub interval: u64,
    /// Global step at which the interval closed.
    pub step: u64,
    pub stage: Stage,
    pub avg_label_loss: f64,
    pub labels: BTreeMap<String, LabelOutcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopicWeightTable {
    weights: BTreeMap<TopicLabel, f64>,
    stage: Option<Stage>,
    finalized_intervals: u64,
}

impl TopicWeightTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current weight; labels never seen are at 1.
    pub fn weight(&self, label: &str) -> f64 {
        self.weights.get(label).copied().unwrap_or(1.0)
    }

    pub fn weights(&self) -> &BTreeMap<TopicLabel, f64> {
        &self.weights
    }

    /// Stage of the most recent finalization, if any.
    pub fn stage(&self) -> Option<Stage> {
        self.stage
    }

    pub fn finalized_intervals(&self) -> u64 {
        self.finalized_intervals
    }

    /// Step at which the next finalization happens.
    pub fn next_boundary_step(&self, config: &ReweighterConfig) -> u64 {
        (self.finalized_intervals + 1) * config.interval_steps
    }

    /// Registers labels at weight 1 without touching existing entries.
    pub fn observe<'a>(&mut self, labels: impl IntoIterator<Item = &'a TopicLabel>) {
        for label in labels {
            self.weights.entry(label.clone()).or_insert(1.0);
        }
    }

    /// `min(prod of label weights, beta)`.
    pub fn multiplier(&self, labels: &[TopicLabel], config: &ReweighterConfig) -> f64 {
        let distinct: BTreeSet<&TopicLabel> = labels.iter().collect();
        let product: f64 = distinct.into_iter().map(|l| self.weight(l.as_str())).product();
        product.min(config.beta)
    }

    /// Advances the interval counter without changing any weight. Used by
    /// runs that collect statistics but never reweight.
    pub fn skip_interval(&mut self) {
        self.finalized_intervals += 1;
    }

    /// Closes the current interval with the stage the schedule prescribes.
    pub fn finalize_next(
        &mut self,
        acc: &mut IntervalAccumulator,
        config: &ReweighterConfig,
    ) -> Result<IntervalSummary, ReweightError> {
        let stage = stage_for_step(self.next_boundary_step(config), config);
        self.finalize_interval(acc, config, stage)
    }

    /// Applies the stage update to every label observed in `acc`, then
    /// empties `acc`. On error nothing is modified.
    pub fn finalize_interval(
        &mut self,
        acc: &mut IntervalAccumulator,
        config: &ReweighterConfig,
        stage: Stage,
    ) -> Result<IntervalSummary, ReweightError> {
        let step = self.next_boundary_step(config);
        let expected = stage_for_step(step, config);
        if stage != expected {
            return Err(ReweightError::StageMismatch {
                requested: stage,
                expected,
                step,
            });
        }
        let losses = acc.label_losses()?;
        let average = average_label_loss(&losses)?;

        let mut labels = BTreeMap::new();
        for (label, loss) in losses {
            let previous = self.weight(label.as_str());
            let weight = updated_weight(previous, loss, average, stage, config);
            labels.insert(label.to_string(), LabelOutcome { loss, weight });
            self.weights.insert(label, weight);
        }

        self.finalized_intervals += 1;
        self.stage = Some(stage);
        acc.clear();

        Ok(IntervalSummary {
            interval: self.finalized_intervals,
            step,
            stage,
            avg_label_loss: average,
            labels,
        })
    }
}

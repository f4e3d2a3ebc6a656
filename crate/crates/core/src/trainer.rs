//! Training loop that ties the toy model to the topic reweighter.
//!
//! Per step: draw a batch (with replacement), compute each sample's raw loss,
//! record it for the current interval, scale the sample's gradient by its
//! topic multiplier, average over the batch and take one SGD step. Every
//! `interval_steps` steps the interval is closed and the topic weights are
//! updated for the next one.

use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Sample, Vocab};
use crate::model::{ModelError, ToyModel};
use crate::reweight::{
    stage_for_step, IntervalAccumulator, IntervalSummary, LabelOutcome, ReweightError,
    ReweighterConfig, Stage, TopicLabel, TopicWeightTable,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {sample_id:?} has no topic labels; strategy {strategy} needs every sample labeled")]
    Unlabeled { sample_id: String, strategy: Strategy },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite gradient at step {step} on sample {sample_id:?} (parameter norm {parameter_norm})")]
    NonFiniteGradient {
        step: u64,
        sample_id: String,
        parameter_norm: f64,
    },
    #[error("checkpoint does not match this run: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error("failed to write training output: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Unweighted training.
    Standard,
    /// Stage 1 updates for the whole run.
    Stage1Only,
    /// Stage 1 until the transition step, Stage 2 afterwards.
    #[default]
    Toremi,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Standard => "standard",
            Strategy::Stage1Only => "stage1_only",
            Strategy::Toremi => "toremi",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Strategy::Standard),
            "stage1_only" | "stage1-only" | "stage1" => Ok(Strategy::Stage1Only),
            "toremi" => Ok(Strategy::Toremi),
            other => Err(format!(
                "unknown strategy {other:?} (expected standard, stage1_only or toremi)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Predicted positions per training window.
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub reweighter: ReweighterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 8000,
            batch_size: 8,
            seed: 0,
            strategy: Strategy::Toremi,
            sequence_length: 64,
            learning_rate: 0.1,
            reweighter: ReweighterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.reweighter.validate()?;
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(self.reweighter.interval_steps) {
            return bad(format!(
                "total_steps ({}) must be a positive multiple of interval_steps ({})",
                self.total_steps, self.reweighter.interval_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }

    /// Reweighter settings the run actually uses. Stage-1-only pushes the
    /// transition past the end of training.
    pub fn effective_reweighter(&self) -> ReweighterConfig {
        let mut cfg = self.reweighter.clone();
        if self.strategy == Strategy::Stage1Only {
            let interval = cfg.interval_steps;
            cfg.transition_step = (self.total_steps / interval + 1) * interval;
        }
        cfg
    }
}

/// One metrics line: a single sample within a single step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub sample_id: String,
    pub raw_loss: f64,
    pub multiplier: f64,
    pub weighted_loss: f64,
}

/// A training window drawn from a sample.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub sample_id: &'a str,
    pub labels: &'a [TopicLabel],
    pub tokens: &'a [usize],
}

/// One SGD step on `batch`. Raw losses go into `acc` (for labeled samples),
/// gradients are scaled by the topic multiplier (1 under `Standard`) and
/// averaged over the batch.
pub fn train_step(
    model: &mut ToyModel,
    batch: &[BatchItem<'_>],
    table: &TopicWeightTable,
    acc: &mut IntervalAccumulator,
    config: &TrainConfig,
    reweighter: &ReweighterConfig,
    step: u64,
) -> Result<Vec<StepRecord>, TrainError> {
    let stage = stage_for_step(step, reweighter);
    let mut grad = vec![0.0; model.logits().len()];
    let mut records = Vec::with_capacity(batch.len());
    for item in batch {
        let multiplier = match config.strategy {
            Strategy::Standard => 1.0,
            Strategy::Stage1Only | Strategy::Toremi => table.multiplier(item.labels, reweighter),
        };
        let raw_loss = model.accumulate_gradient(item.tokens, multiplier, &mut grad)?;
        if !raw_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                step,
                sample_id: item.sample_id.to_owned(),
                parameter_norm: model.parameter_norm(),
            });
        }
        if !item.labels.is_empty() {
            acc.record_sample(item.sample_id, item.labels, raw_loss)?;
        }
        records.push(StepRecord {
            step,
            stage,
            sample_id: item.sample_id.to_owned(),
            raw_loss,
            multiplier,
            weighted_loss: multiplier * raw_loss,
        });
    }
    let delta = model.descent_delta(&grad, batch.len());
    model.apply_delta(&delta);
    if model.logits().iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            step,
            sample_id: batch.last().map(|b| b.sample_id.to_owned()).unwrap_or_default(),
            parameter_norm: model.parameter_norm(),
        });
    }
    acc.end_step();
    Ok(records)
}

#[derive(Debug, Clone)]
struct EncodedSample {
    id: String,
    labels: Vec<TopicLabel>,
    tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub learning_rate: f64,
    pub theta: Vec<f64>,
    pub step: u64,
    pub rng: RngState,
    pub weights: TopicWeightTable,
    pub config: TrainConfig,
}

pub struct Trainer {
    config: TrainConfig,
    reweighter: ReweighterConfig,
    model: ToyModel,
    table: TopicWeightTable,
    acc: IntervalAccumulator,
    rng: ChaCha8Rng,
    step: u64,
    samples: Vec<EncodedSample>,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("strategy", &self.config.strategy)
            .field("samples", &self.samples.len())
            .finish()
    }
}

impl Trainer {
    /// Validates config and corpus up front; nothing is trained yet.
    pub fn new(corpus: &[Sample], vocab: Vocab, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let samples = encode_corpus(corpus, &vocab, config.strategy)?;
        let model = ToyModel::uniform(vocab, config.learning_rate)?;
        let rng = seed::rng_for(config.seed, "train");
        Ok(Self {
            reweighter: config.effective_reweighter(),
            config,
            model,
            table: TopicWeightTable::new(),
            acc: IntervalAccumulator::new(),
            rng,
            step: 0,
            samples,
        })
    }

    pub fn resume(corpus: &[Sample], checkpoint: Checkpoint) -> Result<Self, TrainError> {
        let config = checkpoint.config;
        config.validate()?;
        let interval = config.reweighter.interval_steps;
        if !checkpoint.step.is_multiple_of(interval) || checkpoint.step > config.total_steps {
            return Err(TrainError::CheckpointMismatch(format!(
                "step {} is not an interval boundary within {} steps",
                checkpoint.step, config.total_steps
            )));
        }
        if checkpoint.weights.finalized_intervals() != checkpoint.step / interval {
            return Err(TrainError::CheckpointMismatch(
                "weight table interval count disagrees with the step".into(),
            ));
        }
        let samples = encode_corpus(corpus, &checkpoint.vocab, config.strategy)?;
        let model = ToyModel::from_logits(checkpoint.vocab, checkpoint.theta, checkpoint.learning_rate)?;
        let mut rng = ChaCha8Rng::from_seed(checkpoint.rng.seed);
        rng.set_word_pos(checkpoint.rng.word_pos);
        Ok(Self {
            reweighter: config.effective_reweighter(),
            config,
            model,
            table: checkpoint.weights,
            acc: IntervalAccumulator::new(),
            rng,
            step: checkpoint.step,
            samples,
        })
    }

    /// Only valid at interval boundaries.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            vocab: self.model.vocab().clone(),
            learning_rate: self.model.learning_rate(),
            theta: self.model.logits().to_vec(),
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                word_pos: self.rng.get_word_pos(),
            },
            weights: self.table.clone(),
            config: self.config.clone(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn into_model(self) -> ToyModel {
        self.model
    }

    pub fn table(&self) -> &TopicWeightTable {
        &self.table
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Mutable access to the weight table, e.g. to pin weights in experiments.
    pub fn table_mut(&mut self) -> &mut TopicWeightTable {
        &mut self.table
    }

    /// Runs one step. Returns the per-sample records and, when the step
    /// closes an interval, the interval summary.
    pub fn advance(&mut self) -> Result<(Vec<StepRecord>, Option<IntervalSummary>), TrainError> {
        let t = self.config.sequence_length;
        let n = self.samples.len();
        let mut picks = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = self.rng.random_range(0..n);
            let len = self.samples[idx].tokens.len();
            let window = (t + 1).min(len);
            let offset = if len > window {
                self.rng.random_range(0..=len - window)
            } else {
                0
            };
            picks.push((idx, offset, window));
        }
        let batch: Vec<BatchItem<'_>> = picks
            .iter()
            .map(|&(idx, offset, window)| {
                let s = &self.samples[idx];
                BatchItem {
                    sample_id: &s.id,
                    labels: &s.labels,
                    tokens: &s.tokens[offset..offset + window],
                }
            })
            .collect();
        let records = train_step(
            &mut self.model,
            &batch,
            &self.table,
            &mut self.acc,
            &self.config,
            &self.reweighter,
            self.step,
        )?;
        self.step += 1;

        let summary = if self.step.is_multiple_of(self.reweighter.interval_steps) {
            self.close_interval()?
        } else {
            None
        };
        Ok((records, summary))
    }

    fn close_interval(&mut self) -> Result<Option<IntervalSummary>, TrainError> {
        match self.config.strategy {
            Strategy::Stage1Only | Strategy::Toremi => {
                Ok(Some(self.table.finalize_next(&mut self.acc, &self.reweighter)?))
            }
            Strategy::Standard => {
                // statistics only; weights stay at 1
                let step = self.table.next_boundary_step(&self.reweighter);
                let summary = if self.acc.is_empty() {
                    None
                } else {
                    let losses = self.acc.label_losses()?;
                    let average = crate::reweight::average_label_loss(&losses)?;
                    Some(IntervalSummary {
                        interval: step / self.reweighter.interval_steps,
                        step,
                        stage: stage_for_step(step, &self.reweighter),
                        avg_label_loss: average,
                        labels: losses
                            .into_iter()
                            .map(|(l, loss)| (l.to_string(), LabelOutcome { loss, weight: 1.0 }))
                            .collect(),
                    })
                };
                self.acc.clear();
                self.table.skip_interval();
                Ok(summary)
            }
        }
    }

    /// Trains to `total_steps`, streaming metrics and trace lines.
    pub fn run(
        &mut self,
        mut metrics: impl Write,
        mut trace: impl Write,
    ) -> Result<Vec<IntervalSummary>, TrainError> {
        let mut summaries = Vec::new();
        while !self.is_done() {
            let (records, summary) = self.advance()?;
            for record in &records {
                serde_json::to_writer(&mut metrics, record).map_err(io::Error::from)?;
                metrics.write_all(b"\n")?;
            }
            if let Some(summary) = summary {
                serde_json::to_writer(&mut trace, &summary).map_err(io::Error::from)?;
                trace.write_all(b"\n")?;
                summaries.push(summary);
            }
        }
        metrics.flush()?;
        trace.flush()?;
        Ok(summaries)
    }
}

fn encode_corpus(
    corpus: &[Sample],
    vocab: &Vocab,
    strategy: Strategy,
) -> Result<Vec<EncodedSample>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if strategy != Strategy::Standard {
        if let Some(s) = corpus.iter().find(|s| s.labels.is_empty()) {
            return Err(TrainError::Unlabeled {
                sample_id: s.id.clone(),
                strategy,
            });
        }
    }
    corpus
        .iter()
        .map(|s| {
            let tokens = vocab.encode(&s.id, &s.text)?;
            if tokens.len() < 2 {
                return Err(TrainError::Model(ModelError::SequenceTooShort(tokens.len())));
            }
            Ok(EncodedSample {
                id: s.id.clone(),
                labels: s.labels.clone(),
                tokens,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub table: TopicWeightTable,
    pub trace: Vec<IntervalSummary>,
}

/// Builds the vocabulary from `corpus` and trains to completion.
pub fn run_training(
    corpus: &[Sample],
    config: &TrainConfig,
    metrics: impl Write,
    trace: impl Write,
) -> Result<TrainOutcome, TrainError> {
    let vocab = Vocab::from_corpus(corpus)?;
    let mut trainer = Trainer::new(corpus, vocab, config.clone())?;
    let summaries = trainer.run(metrics, trace)?;
    Ok(TrainOutcome {
        table: trainer.table.clone(),
        model: trainer.into_model(),
        trace: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus() -> Vec<Sample> {
        let a = TopicLabel::new("A").unwrap();
        let b = TopicLabel::new("B").unwrap();
        vec![
            Sample::new("a0", "abababababab").with_labels([a.clone()]),
            Sample::new("a1", "babababa").with_labels([a]),
            Sample::new("b0", "cdcdccddcdcd").with_labels([b.clone()]),
            Sample::new("b1", "dcdcdddc").with_labels([b]),
        ]
    }

    fn small_config(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            total_steps: 40,
            batch_size: 4,
            sequence_length: 6,
            strategy,
            reweighter: ReweighterConfig {
                interval_steps: 10,
                transition_step: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn standard_matches_unit_weight_toremi_step() {
        let corpus = tiny_corpus();
        let vocab = Vocab::from_corpus(&corpus).unwrap();
        let tokens: Vec<Vec<usize>> = corpus
            .iter()
            .map(|s| vocab.encode(&s.id, &s.text).unwrap())
            .collect();
        let batch: Vec<BatchItem> = corpus
            .iter()
            .zip(&tokens)
            .map(|(s, t)| BatchItem {
                sample_id: &s.id,
                labels: &s.labels,
                tokens: t,
            })
            .collect();
        let table = TopicWeightTable::new();
        let mut runs = Vec::new();
        for strategy in [Strategy::Standard, Strategy::Toremi] {
            let config = small_config(strategy);
            let mut model = ToyModel::uniform(vocab.clone(), 0.1).unwrap();
            let mut acc = IntervalAccumulator::new();
            train_step(&mut model, &batch, &table, &mut acc, &config, &config.reweighter, 0).unwrap();
            runs.push(model.logits().to_vec());
        }
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn unlabeled_sample_rejected_before_training() {
        let mut corpus = tiny_corpus();
        corpus[2].labels.clear();
        let vocab = Vocab::from_corpus(&corpus).unwrap();
        let err = Trainer::new(&corpus, vocab.clone(), small_config(Strategy::Toremi)).unwrap_err();
        assert!(err.to_string().contains("\"b0\""), "{err}");
        assert!(Trainer::new(&corpus, vocab, small_config(Strategy::Standard)).is_ok());
    }

    #[test]
    fn total_steps_must_align_with_interval() {
        let mut config = small_config(Strategy::Toremi);
        config.total_steps = 45;
        assert!(matches!(config.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn stage1_only_never_reaches_stage2() {
        let config = small_config(Strategy::Stage1Only);
        let out = run_training(&tiny_corpus(), &config, io::sink(), io::sink()).unwrap();
        assert_eq!(out.trace.len(), 4);
        assert!(out.trace.iter().all(|s| s.stage == Stage::Stage1));
    }

    #[test]
    fn toremi_trace_follows_schedule() {
        let config = small_config(Strategy::Toremi);
        let out = run_training(&tiny_corpus(), &config, io::sink(), io::sink()).unwrap();
        let stages: Vec<Stage> = out.trace.iter().map(|s| s.stage).collect();
        assert_eq!(stages, [Stage::Stage1, Stage::Stage2, Stage::Stage2, Stage::Stage2]);
        for (f, s) in out.trace.iter().enumerate() {
            assert_eq!(s.interval, f as u64 + 1);
            assert_eq!(s.step, (f as u64 + 1) * 10);
        }
    }

    #[test]
    fn standard_trace_keeps_unit_weights() {
        let config = small_config(Strategy::Standard);
        let out = run_training(&tiny_corpus(), &config, io::sink(), io::sink()).unwrap();
        assert_eq!(out.trace.len(), 4);
        assert!(out
            .trace
            .iter()
            .flat_map(|s| s.labels.values())
            .all(|o| o.weight == 1.0));
    }

    #[test]
    fn resume_from_checkpoint_is_exact() {
        let corpus = tiny_corpus();
        let config = small_config(Strategy::Toremi);
        let full = run_training(&corpus, &config, io::sink(), io::sink()).unwrap();

        let vocab = Vocab::from_corpus(&corpus).unwrap();
        let mut first = Trainer::new(&corpus, vocab, config).unwrap();
        while first.step() < 20 {
            first.advance().unwrap();
        }
        let json = serde_json::to_string(&first.checkpoint()).unwrap();
        let checkpoint: Checkpoint = serde_json::from_str(&json).unwrap();
        let mut second = Trainer::resume(&corpus, checkpoint).unwrap();
        second.run(io::sink(), io::sink()).unwrap();
        assert_eq!(second.model().logits(), full.model.logits());
        assert_eq!(second.table(), &full.table);
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("toremi".parse::<Strategy>(), Ok(Strategy::Toremi));
        assert_eq!("stage1_only".parse::<Strategy>(), Ok(Strategy::Stage1Only));
        assert!("focal".parse::<Strategy>().is_err());
    }
}

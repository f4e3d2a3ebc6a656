//! Held-out perplexity and run comparison reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Sample};
use crate::model::{ModelError, ToyModel};
use crate::reweight::IntervalSummary;
use crate::trainer::StepRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("held-out set is empty")]
    EmptyHeldout,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sample {sample_id:?}: {source}")]
    Model {
        sample_id: String,
        #[source]
        source: ModelError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: corrupt trace at byte offset {offset}: {message}")]
    CorruptTrace {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("step grids differ between {first} and {second}")]
    StepGridMismatch { first: String, second: String },
    #[error("nothing to compare: {0}")]
    NoRuns(String),
}

/// Neumaier-compensated sum; stable under reordering to well below 1e-12
/// for the magnitudes seen here.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            compensation += (sum - t) + v;
        } else {
            compensation += (v - t) + sum;
        }
        sum = t;
    }
    sum + compensation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub step: u64,
    pub samples: usize,
    pub overall: f64,
    pub per_topic: BTreeMap<String, f64>,
    pub per_topic_samples: BTreeMap<String, usize>,
}

/// `exp(mean per-sample loss)` over the whole held-out set and per topic.
/// Multi-label samples count toward each of their topics. The model is only
/// read.
pub fn evaluate(model: &ToyModel, heldout: &[Sample], step: u64) -> Result<PerplexityReport, EvalError> {
    if heldout.is_empty() {
        return Err(EvalError::EmptyHeldout);
    }
    let mut losses = Vec::with_capacity(heldout.len());
    let mut per_topic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for sample in heldout {
        let tokens = model.vocab().encode(&sample.id, &sample.text)?;
        let loss = model.sample_loss(&tokens).map_err(|source| EvalError::Model {
            sample_id: sample.id.clone(),
            source,
        })?;
        losses.push(loss);
        let distinct: BTreeSet<&str> = sample.labels.iter().map(|l| l.as_str()).collect();
        for label in distinct {
            per_topic.entry(label.to_owned()).or_default().push(loss);
        }
    }
    let perplexity = |values: &[f64]| (compensated_sum(values.iter().copied()) / values.len() as f64).exp();
    Ok(PerplexityReport {
        step,
        samples: heldout.len(),
        overall: perplexity(&losses),
        per_topic_samples: per_topic.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        per_topic: per_topic.iter().map(|(k, v)| (k.clone(), perplexity(v))).collect(),
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: shown.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<IntervalSummary>, EvalError> {
    read_jsonl(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, EvalError> {
    read_jsonl(path)
}

/// Files belonging to one training run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub name: String,
    pub metrics: PathBuf,
    pub trace: PathBuf,
    pub eval: Option<PathBuf>,
}

impl RunFiles {
    /// Conventional layout of a `train` output directory.
    pub fn from_dir(name: impl Into<String>, dir: &Path) -> Self {
        let eval = dir.join("eval.json");
        Self {
            name: name.into(),
            metrics: dir.join("metrics.jsonl"),
            trace: dir.join("trace.jsonl"),
            eval: eval.exists().then_some(eval),
        }
    }
}

/// One row of `curves.csv`. Topic `*` carries the mean raw loss and mean
/// multiplier over all samples of the interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub strategy: String,
    pub topic: String,
    pub loss: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub intervals: usize,
    pub final_step: u64,
    pub final_mean_loss: f64,
    pub final_weights: BTreeMap<String, f64>,
    /// First interval-end step whose mean raw loss is at or below the
    /// shared threshold.
    pub threshold_step: Option<u64>,
    /// Per-interval mean loss minus the baseline run's.
    pub loss_deltas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<PerplexityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub threshold: f64,
    pub runs: Vec<RunSummary>,
    #[serde(skip)]
    pub curves: Vec<CurveRow>,
}

/// Mean raw loss and multiplier per interval, keyed by interval-end step.
fn interval_means(records: &[StepRecord], steps: &[u64]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(steps.len());
    let mut start = 0u64;
    let mut cursor = 0usize;
    for &end in steps {
        let mut losses = Vec::new();
        let mut multipliers = Vec::new();
        while cursor < records.len() && records[cursor].step < end {
            if records[cursor].step >= start {
                losses.push(records[cursor].raw_loss);
                multipliers.push(records[cursor].multiplier);
            }
            cursor += 1;
        }
        let n = losses.len().max(1) as f64;
        out.push((
            compensated_sum(losses) / n,
            compensated_sum(multipliers) / n,
        ));
        start = end;
    }
    out
}

/// Builds loss curves, final weights and threshold-crossing steps. The first
/// run is the baseline for deltas. `threshold` defaults to the largest final
/// interval loss, so every run crosses it.
pub fn compare_runs(runs: &[RunFiles], threshold: Option<f64>) -> Result<ComparisonReport, EvalError> {
    let Some(first) = runs.first() else {
        return Err(EvalError::NoRuns("at least one run is required".into()));
    };
    let mut loaded = Vec::new();
    for run in runs {
        let trace = read_trace(&run.trace)?;
        let metrics = read_metrics(&run.metrics)?;
        let perplexity = match &run.eval {
            Some(path) => {
                let file = File::open(path).map_err(|source| EvalError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Some(serde_json::from_reader::<_, PerplexityReport>(BufReader::new(file)).map_err(
                    |e| EvalError::Parse {
                        path: path.display().to_string(),
                        line: e.line(),
                        message: e.to_string(),
                    },
                )?)
            }
            None => None,
        };
        loaded.push((run, trace, metrics, perplexity));
    }

    let grid = |trace: &[IntervalSummary]| trace.iter().map(|s| s.step).collect::<Vec<_>>();
    let metric_grid = |m: &[StepRecord]| m.iter().map(|r| r.step).collect::<BTreeSet<_>>();
    let base_grid = grid(&loaded[0].1);
    let base_metric_grid = metric_grid(&loaded[0].2);
    for (run, trace, metrics, _) in &loaded[1..] {
        if grid(trace) != base_grid {
            return Err(EvalError::StepGridMismatch {
                first: first.trace.display().to_string(),
                second: run.trace.display().to_string(),
            });
        }
        if metric_grid(metrics) != base_metric_grid {
            return Err(EvalError::StepGridMismatch {
                first: first.metrics.display().to_string(),
                second: run.metrics.display().to_string(),
            });
        }
    }

    let means: Vec<Vec<(f64, f64)>> = loaded
        .iter()
        .map(|(_, _, metrics, _)| interval_means(metrics, &base_grid))
        .collect();
    let threshold = threshold.unwrap_or_else(|| {
        means
            .iter()
            .filter_map(|m| m.last().map(|(loss, _)| *loss))
            .fold(f64::NEG_INFINITY, f64::max)
    });

    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    for ((run, trace, _, perplexity), run_means) in loaded.into_iter().zip(&means) {
        let mut final_weights = BTreeMap::new();
        for (summary, (loss, multiplier)) in trace.iter().zip(run_means) {
            curves.push(CurveRow {
                step: summary.step,
                strategy: run.name.clone(),
                topic: "*".into(),
                loss: *loss,
                weight: *multiplier,
            });
            for (topic, outcome) in &summary.labels {
                curves.push(CurveRow {
                    step: summary.step,
                    strategy: run.name.clone(),
                    topic: topic.clone(),
                    loss: outcome.loss,
                    weight: outcome.weight,
                });
                final_weights.insert(topic.clone(), outcome.weight);
            }
        }
        let threshold_step = trace
            .iter()
            .zip(run_means)
            .find(|(_, (loss, _))| *loss <= threshold)
            .map(|(s, _)| s.step);
        summaries.push(RunSummary {
            name: run.name.clone(),
            intervals: trace.len(),
            final_step: trace.last().map(|s| s.step).unwrap_or(0),
            final_mean_loss: run_means.last().map(|(l, _)| *l).unwrap_or(f64::NAN),
            final_weights,
            threshold_step,
            loss_deltas: run_means
                .iter()
                .zip(&means[0])
                .map(|((a, _), (b, _))| a - b)
                .collect(),
            perplexity,
        });
    }
    Ok(ComparisonReport {
        baseline: first.name.clone(),
        threshold,
        runs: summaries,
        curves,
    })
}

pub fn write_curves_csv(mut out: impl Write, rows: &[CurveRow]) -> io::Result<()> {
    writeln!(out, "step,strategy,topic,loss,weight")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.step,
            csv_field(&row.strategy),
            csv_field(&row.topic),
            row.loss,
            row.weight
        )?;
    }
    out.flush()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Weight trajectory of one topic in a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicTrajectory {
    pub intervals: usize,
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub beta_clips: usize,
    pub gamma_floors: usize,
}

impl TopicTrajectory {
    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceInspection {
    pub intervals: usize,
    /// First interval finalized with Stage 2 rules.
    pub transition_interval: Option<u64>,
    pub beta: f64,
    pub gamma: f64,
    pub beta_clips: usize,
    pub gamma_floors: usize,
    pub topics: BTreeMap<String, TopicTrajectory>,
}

/// Parses a trace, reporting the byte offset of the first malformed record.
pub fn parse_trace(bytes: &[u8], path: &str) -> Result<Vec<IntervalSummary>, EvalError> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let start = offset;
        offset += line.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice::<IntervalSummary>(line) {
            Ok(summary) => out.push(summary),
            Err(e) => {
                // serde_json columns are 1-based byte positions within the line
                let col = e.column().saturating_sub(1).min(line.len());
                return Err(EvalError::CorruptTrace {
                    path: path.to_owned(),
                    offset: start + col,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Weight extremes per topic, the stage transition and the number of
/// weights sitting exactly at `beta` or `gamma`.
pub fn inspect_trace(trace: &[IntervalSummary], beta: f64, gamma: f64) -> TraceInspection {
    let mut topics: BTreeMap<String, TopicTrajectory> = BTreeMap::new();
    let mut transition_interval = None;
    for summary in trace {
        if transition_interval.is_none() && summary.stage == crate::reweight::Stage::Stage2 {
            transition_interval = Some(summary.interval);
        }
        for (name, outcome) in &summary.labels {
            let w = outcome.weight;
            let t = topics.entry(name.clone()).or_insert(TopicTrajectory {
                intervals: 0,
                first: w,
                last: w,
                min: w,
                max: w,
                beta_clips: 0,
                gamma_floors: 0,
            });
            t.intervals += 1;
            t.last = w;
            t.min = t.min.min(w);
            t.max = t.max.max(w);
            t.beta_clips += usize::from(w == beta);
            t.gamma_floors += usize::from(w == gamma);
        }
    }
    TraceInspection {
        intervals: trace.len(),
        transition_interval,
        beta,
        gamma,
        beta_clips: topics.values().map(|t| t.beta_clips).sum(),
        gamma_floors: topics.values().map(|t| t.gamma_floors).sum(),
        topics,
    }
}

//! Topic annotation: embed samples, cluster them, extract per-cluster
//! keywords and ask a labeler for topic names.

mod embed;
mod kmeans;
mod labeler;
mod tfidf;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{Embedder, EmbeddingVector, FileEmbedder, HashedNgramEmbedder};
pub use kmeans::{kmeans, squared_distance, ClusterAssignment, KMeansParams};
pub use labeler::{
    build_prompt, parse_label_response, CompletionClient, HttpCompletionClient, LabelMode, Labeler,
    LabelerRequest, LlmLabeler, MockLabeler, MockRule, PromptTemplates, Taxonomy,
};
pub use tfidf::{tfidf_keywords, tokenize, Keyword, KeywordSet, STOPWORDS};

use crate::corpus::{save_corpus, CorpusError, Sample};
use crate::reweight::TopicLabel;
use crate::seed::fnv1a64;

/// Characters of sample text passed to the labeler in per-sample mode.
const EXCERPT_CHARS: usize = 400;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("sample {0:?} has empty text")]
    EmptyText(String),
    #[error("invalid annotation config: {0}")]
    InvalidConfig(String),
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error("select mode requires a taxonomy")]
    MissingTaxonomy,
    #[error("labeler response holds no JSON array of labels: {0:?}")]
    BadResponse(String),
    #[error("labeler failed: {0}")]
    Labeler(String),
    #[error("labels {labels:?} are not in the taxonomy (after {attempts} attempts)")]
    OutsideTaxonomy { labels: Vec<String>, attempts: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("annotation aborted after {completed} of {total} labeling jobs; progress saved to {partial}: {source}")]
    Aborted {
        completed: usize,
        total: usize,
        partial: String,
        #[source]
        source: Box<AnnotateError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl AnnotateError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        AnnotateError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One labeler call per cluster; members share the labels.
    #[default]
    Cluster,
    /// One call per sample, with its cluster's keywords as context.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub k: usize,
    /// Derived from the run seed, so not part of the file format.
    #[serde(skip)]
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub top_k: usize,
    pub dimension: usize,
    pub mode: LabelMode,
    pub granularity: Granularity,
    pub max_labels: usize,
    /// Extra labeler calls allowed when select mode returns labels outside
    /// the taxonomy.
    pub label_retries: usize,
    /// Leave samples that already carry labels untouched.
    pub skip_labeled: bool,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        let km = KMeansParams::default();
        Self {
            k: km.k,
            seed: 0,
            max_iters: km.max_iters,
            tol: km.tol,
            top_k: 100,
            dimension: 256,
            mode: LabelMode::Generate,
            granularity: Granularity::Cluster,
            max_labels: 3,
            label_retries: 2,
            skip_labeled: false,
        }
    }
}

impl AnnotateConfig {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        let bad = |m: &str| Err(AnnotateError::InvalidConfig(m.to_owned()));
        if self.k < 2 {
            return bad("k must be at least 2 (TF-IDF needs two clusters)");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad("tol must be a positive finite number");
        }
        if self.top_k == 0 || self.max_labels == 0 || self.dimension == 0 {
            return bad("top_k, max_labels and dimension must be positive");
        }
        Ok(())
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            seed: self.seed,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

/// Intermediate results kept alongside the labeled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationArtifacts {
    /// Ids of the samples that went through the pipeline, in input order.
    pub sample_ids: Vec<String>,
    #[serde(skip)]
    pub embeddings: Vec<EmbeddingVector>,
    pub clusters: ClusterAssignment,
    pub keywords: Vec<KeywordSet>,
    /// Labels per labeling job: per cluster or per annotated sample.
    pub job_labels: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub samples: Vec<Sample>,
    /// `None` when nothing needed labeling.
    pub artifacts: Option<AnnotationArtifacts>,
}

/// Where labeling progress is persisted. `checkpoint` is appended to after
/// every finished job; `partial` receives the samples labeled so far when a
/// job fails.
#[derive(Debug, Clone)]
pub struct ProgressFiles {
    pub checkpoint: PathBuf,
    pub partial: PathBuf,
}

impl ProgressFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("annotate.checkpoint.jsonl"),
            partial: dir.join("annotate.partial.jsonl"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
    jobs: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    job: usize,
    labels: Vec<String>,
}

fn run_fingerprint(
    samples: &[&Sample],
    config: &AnnotateConfig,
    taxonomy: Option<&Taxonomy>,
) -> String {
    let mut buf = serde_json::to_vec(config).expect("config serializes");
    buf.extend(config.seed.to_le_bytes());
    if let Some(t) = taxonomy {
        buf.extend(t.labels().join("\n").bytes());
    }
    for s in samples {
        buf.push(0x1e);
        buf.extend(s.id.bytes());
        buf.push(0x1f);
        buf.extend(s.text.bytes());
    }
    format!("{:016x}", fnv1a64(&buf))
}

fn load_checkpoint(path: &Path, fingerprint: &str, jobs: usize) -> Result<BTreeMap<usize, Vec<String>>, AnnotateError> {
    let mut done = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(AnnotateError::io(path, e)),
    };
    let err = |message: String| AnnotateError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header: CheckpointHeader = match lines.next() {
        Some(line) => {
            serde_json::from_str(&line.map_err(|e| AnnotateError::io(path, e))?).map_err(|e| err(e.to_string()))?
        }
        None => return Ok(done),
    };
    if header.fingerprint != fingerprint || header.jobs != jobs {
        return Err(err(
            "written by a run with a different corpus or config; delete it to start over".into(),
        ));
    }
    for line in lines {
        let line = line.map_err(|e| AnnotateError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from a crash is dropped and that job redone
        let Ok(entry) = serde_json::from_str::<CheckpointEntry>(&line) else {
            break;
        };
        if entry.job >= jobs {
            return Err(err(format!("job {} out of range", entry.job)));
        }
        done.insert(entry.job, entry.labels);
    }
    Ok(done)
}

fn request_labels(
    labeler: &dyn Labeler,
    request: &LabelerRequest,
    retries: usize,
) -> Result<Vec<String>, AnnotateError> {
    let Some(taxonomy) = request.taxonomy.as_ref().filter(|_| request.mode == LabelMode::Select) else {
        return labeler.label(request);
    };
    let mut last = Vec::new();
    for attempt in 0..=retries {
        let labels = labeler.label(request)?;
        if labels.iter().all(|l| taxonomy.contains(l)) {
            return Ok(labels);
        }
        log::warn!("labels {labels:?} outside the taxonomy (attempt {})", attempt + 1);
        last = labels;
    }
    Err(AnnotateError::OutsideTaxonomy {
        labels: last,
        attempts: retries + 1,
    })
}

fn to_topic_labels(labels: &[String]) -> Result<Vec<TopicLabel>, AnnotateError> {
    let mut out: Vec<TopicLabel> = Vec::new();
    for l in labels {
        let label = TopicLabel::new(l).map_err(|_| AnnotateError::BadResponse(format!("{labels:?}")))?;
        if !out.contains(&label) {
            out.push(label);
        }
    }
    if out.is_empty() {
        return Err(AnnotateError::BadResponse(format!("{labels:?}")));
    }
    Ok(out)
}

/// Runs embedding, k-means, TF-IDF and labeling over `samples`. Output keeps
/// input order and ids; each processed sample gets its labels and cluster.
///
/// With `progress`, finished labeling jobs are checkpointed so a failed run
/// can be resumed by calling again with the same inputs.
pub fn annotate_corpus(
    samples: &[Sample],
    config: &AnnotateConfig,
    embedder: &dyn Embedder,
    labeler: &dyn Labeler,
    taxonomy: Option<&Taxonomy>,
    progress: Option<&ProgressFiles>,
) -> Result<Annotation, AnnotateError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(AnnotateError::InvalidConfig("corpus is empty".into()));
    }
    if config.mode == LabelMode::Select && taxonomy.is_none() {
        return Err(AnnotateError::MissingTaxonomy);
    }

    let todo: Vec<usize> = (0..samples.len())
        .filter(|&i| !(config.skip_labeled && !samples[i].labels.is_empty()))
        .collect();
    if todo.is_empty() {
        return Ok(Annotation {
            samples: samples.to_vec(),
            artifacts: None,
        });
    }
    let subset: Vec<&Sample> = todo.iter().map(|&i| &samples[i]).collect();

    let embeddings = subset
        .iter()
        .map(|s| embedder.embed(&s.id, &s.text))
        .collect::<Result<Vec<_>, _>>()?;
    let clusters = kmeans(&embeddings, &config.kmeans_params())?;

    let mut cluster_docs = vec![Vec::new(); config.k];
    for (s, &c) in subset.iter().zip(&clusters.assignment) {
        cluster_docs[c].extend(tokenize(&s.text));
    }
    let keywords = tfidf_keywords(&cluster_docs, config.top_k)?;

    let requests: Vec<LabelerRequest> = match config.granularity {
        Granularity::Cluster => keywords
            .iter()
            .map(|set| LabelerRequest {
                mode: config.mode,
                keywords: set.terms(),
                taxonomy: taxonomy.cloned(),
                max_labels: config.max_labels,
                text: None,
            })
            .collect(),
        Granularity::Sample => subset
            .iter()
            .zip(&clusters.assignment)
            .map(|(s, &c)| LabelerRequest {
                mode: config.mode,
                keywords: keywords[c].terms(),
                taxonomy: taxonomy.cloned(),
                max_labels: config.max_labels,
                text: Some(s.text.chars().take(EXCERPT_CHARS).collect()),
            })
            .collect(),
    };
    let jobs = requests.len();

    let fingerprint = run_fingerprint(&subset, config, taxonomy);
    let mut done = match progress {
        Some(p) => load_checkpoint(&p.checkpoint, &fingerprint, jobs)?,
        None => BTreeMap::new(),
    };
    let mut writer = match progress {
        Some(p) => {
            let fresh = done.is_empty();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&p.checkpoint)
                .map_err(|e| AnnotateError::io(&p.checkpoint, e))?;
            let mut file = io::BufWriter::new(file);
            if fresh {
                let header = CheckpointHeader {
                    fingerprint: fingerprint.clone(),
                    jobs,
                };
                writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))
                    .and_then(|_| file.flush())
                    .map_err(|e| AnnotateError::io(&p.checkpoint, e))?;
            }
            Some(file)
        }
        None => None,
    };
    if !done.is_empty() {
        log::info!("resuming annotation: {} of {jobs} jobs already done", done.len());
    }

    let job_of = |pos: usize| match config.granularity {
        Granularity::Cluster => clusters.assignment[pos],
        Granularity::Sample => pos,
    };
    let assemble = |done: &BTreeMap<usize, Vec<String>>| -> Result<Vec<Sample>, AnnotateError> {
        let mut out = samples.to_vec();
        for (pos, &i) in todo.iter().enumerate() {
            if let Some(labels) = done.get(&job_of(pos)) {
                out[i].labels = to_topic_labels(labels)?;
                out[i].cluster = Some(clusters.assignment[pos]);
            }
        }
        Ok(out)
    };

    for (job, request) in requests.iter().enumerate() {
        if done.contains_key(&job) {
            continue;
        }
        let result = request_labels(labeler, request, config.label_retries)
            .and_then(|labels| to_topic_labels(&labels).map(|_| labels));
        match result {
            Ok(labels) => {
                if let (Some(w), Some(p)) = (writer.as_mut(), progress) {
                    let entry = CheckpointEntry { job, labels: labels.clone() };
                    writeln!(w, "{}", serde_json::to_string(&entry).expect("entry serializes"))
                        .and_then(|_| w.flush())
                        .map_err(|e| AnnotateError::io(&p.checkpoint, e))?;
                }
                done.insert(job, labels);
            }
            Err(source) => {
                let Some(p) = progress else {
                    return Err(source);
                };
                let partial: Vec<Sample> = assemble(&done)?
                    .into_iter()
                    .enumerate()
                    .filter(|(i, s)| !todo.contains(i) || s.cluster.is_some())
                    .map(|(_, s)| s)
                    .collect();
                save_corpus(&p.partial, &partial)?;
                return Err(AnnotateError::Aborted {
                    completed: done.len(),
                    total: jobs,
                    partial: p.partial.display().to_string(),
                    source: Box::new(source),
                });
            }
        }
    }

    let labeled = assemble(&done)?;
    if let Some(p) = progress {
        if p.partial.exists() {
            fs::remove_file(&p.partial).map_err(|e| AnnotateError::io(&p.partial, e))?;
        }
    }
    Ok(Annotation {
        samples: labeled,
        artifacts: Some(AnnotationArtifacts {
            sample_ids: subset.iter().map(|s| s.id.clone()).collect(),
            embeddings,
            clusters,
            keywords,
            job_labels: done.into_values().collect(),
        }),
    })
}

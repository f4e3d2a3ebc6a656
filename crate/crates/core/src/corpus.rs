//! Corpus ingestion, synthetic topic corpora, character-shuffle corruption,
//! byte-level tokenization and stratified held-out splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reweight::TopicLabel;
use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("topic {topic:?} not present in corpus; available topics: {available:?}")]
    UnknownTopic {
        topic: String,
        available: Vec<String>,
    },
    #[error("topic {topic:?} has {count} sample(s); at least 2 are needed for a held-out split")]
    TopicTooSmall { topic: String, count: usize },
    #[error("held-out fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("sample {sample_id:?}: byte {byte:#04x} is not in the model vocabulary")]
    OutOfVocab { sample_id: String, byte: u8 },
    #[error("vocabulary is empty")]
    EmptyVocab,
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub labels: Vec<TopicLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            labels: Vec::new(),
            cluster: None,
        }
    }

    pub fn with_labels(mut self, labels: impl IntoIterator<Item = TopicLabel>) -> Self {
        self.labels = labels.into_iter().collect();
        dedup_labels(&mut self.labels);
        self
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l.as_str() == label)
    }
}

/// Removes repeated labels, keeping the first occurrence of each.
pub fn dedup_labels(labels: &mut Vec<TopicLabel>) {
    let mut seen = HashSet::new();
    labels.retain(|l| seen.insert(l.clone()));
}

fn parse_sample_line(line: &str, line_no: usize) -> Result<Sample, CorpusError> {
    let mut sample: Sample = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    if sample.text.is_empty() {
        return Err(CorpusError::Parse {
            line: line_no,
            message: format!("sample {:?} has empty text", sample.id),
        });
    }
    dedup_labels(&mut sample.labels);
    Ok(sample)
}

/// Reads JSONL samples in file order. Blank lines are skipped.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Sample>, CorpusError> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample_line(&line, line_no)?;
        if !ids.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId(sample.id));
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn write_corpus(mut writer: impl Write, samples: &[Sample]) -> io::Result<()> {
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_corpus(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    write_corpus(io::BufWriter::new(file), samples).map_err(|e| CorpusError::io(path, e))
}

/// Sorted list of every label present in the corpus.
pub fn topics(corpus: &[Sample]) -> Vec<String> {
    corpus
        .iter()
        .flat_map(|s| s.labels.iter().map(|l| l.to_string()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Characters that synthetic token ids render to, in id order.
pub const SYNTHETIC_ALPHABET: &str =
    "abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Separator inserted between synthetic words. Not a topic token.
pub const WORD_SEPARATOR: char = ' ';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTopic {
    pub name: String,
    /// First token id of the topic's slice.
    pub vocab_start: usize,
    pub vocab_len: usize,
    pub zipf_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub topics: Vec<SyntheticTopic>,
    pub samples_per_topic: usize,
    /// Number of predicted positions per sample; texts have one more
    /// character than this.
    pub sequence_length: usize,
    /// Letters per word. 0 emits one unbroken run of letters.
    pub word_length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: vec![
                SyntheticTopic {
                    name: "A".into(),
                    vocab_start: 0,
                    vocab_len: 12,
                    zipf_exponent: 1.5,
                },
                SyntheticTopic {
                    name: "B".into(),
                    vocab_start: 12,
                    vocab_len: 12,
                    zipf_exponent: 1.5,
                },
            ],
            samples_per_topic: 500,
            sequence_length: 64,
            word_length: 6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.topics.is_empty() {
            return bad("at least one topic is required".into());
        }
        if self.samples_per_topic == 0 {
            return bad("samples_per_topic must be positive".into());
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        let alphabet = SYNTHETIC_ALPHABET.len();
        let mut names = HashSet::new();
        for (i, t) in self.topics.iter().enumerate() {
            if TopicLabel::new(&t.name).is_err() || !names.insert(t.name.trim()) {
                return bad(format!("topic name {:?} is empty or repeated", t.name));
            }
            if t.vocab_len == 0 {
                return bad(format!("topic {:?} has an empty vocab slice", t.name));
            }
            if t.vocab_start + t.vocab_len > alphabet {
                return bad(format!(
                    "topic {:?} slice [{}, {}) exceeds the {alphabet}-token alphabet",
                    t.name,
                    t.vocab_start,
                    t.vocab_start + t.vocab_len
                ));
            }
            if !(t.zipf_exponent.is_finite() && t.zipf_exponent >= 0.0) {
                return bad(format!("topic {:?} zipf exponent must be >= 0", t.name));
            }
            for other in &self.topics[..i] {
                let overlap = t.vocab_start < other.vocab_start + other.vocab_len
                    && other.vocab_start < t.vocab_start + t.vocab_len;
                if overlap {
                    return bad(format!(
                        "vocab slices of {:?} and {:?} overlap",
                        other.name, t.name
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn token_char(id: usize) -> Option<char> {
        SYNTHETIC_ALPHABET.as_bytes().get(id).map(|&b| b as char)
    }

    pub fn token_id(c: char) -> Option<usize> {
        SYNTHETIC_ALPHABET.find(c)
    }
}

/// Draws per-topic Markov text. The first letter is uniform over the slice;
/// each following letter sits `r` ranks after its predecessor (cyclically),
/// with `P(r) ∝ (r + 1)^-s`. The stationary letter distribution is uniform,
/// and with `s = 0` every letter is an independent uniform draw.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>, CorpusError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.topics.len() * spec.samples_per_topic);
    for topic in &spec.topics {
        let label = TopicLabel::new(&topic.name).expect("validated");
        let mut rng = seed::rng_for(spec.seed, &format!("synthetic:{}", label));
        let offsets: Vec<f64> = (0..topic.vocab_len)
            .map(|r| ((r + 1) as f64).powf(-topic.zipf_exponent))
            .collect();
        let offset_dist = WeightedIndex::new(&offsets).expect("positive weights");
        let chars = spec.sequence_length + 1;
        for i in 0..spec.samples_per_topic {
            let mut text = String::with_capacity(chars);
            let mut rank = rng.random_range(0..topic.vocab_len);
            let mut letters_in_word = 0;
            while text.len() < chars {
                if spec.word_length > 0 && letters_in_word == spec.word_length {
                    text.push(WORD_SEPARATOR);
                    letters_in_word = 0;
                    continue;
                }
                let id = topic.vocab_start + rank;
                text.push(SyntheticSpec::token_char(id).expect("validated"));
                letters_in_word += 1;
                rank = (rank + offset_dist.sample(&mut rng)) % topic.vocab_len;
            }
            samples.push(
                Sample::new(format!("{}-{:05}", label, i), text).with_labels([label.clone()]),
            );
        }
    }
    Ok(samples)
}

/// Per-sample sub-seed for the shuffle: FNV-1a of (seed, id).
pub fn shuffle_seed(seed: u64, sample_id: &str) -> u64 {
    seed::sub_seed(seed, sample_id)
}

/// Seeded Fisher–Yates permutation of every character of `text`, whitespace
/// included.
pub fn shuffle_chars(text: &str, sub_seed: u64) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    chars.shuffle(&mut rng);
    chars.into_iter().collect()
}

fn unknown_topic(topic: &str, corpus: &[Sample]) -> CorpusError {
    CorpusError::UnknownTopic {
        topic: topic.to_owned(),
        available: topics(corpus),
    }
}

/// Returns a copy of `corpus` in which every sample labeled `topic` has its
/// characters shuffled. Everything else is untouched.
pub fn corrupt_topic(corpus: &[Sample], topic: &str, seed: u64) -> Result<Vec<Sample>, CorpusError> {
    if !corpus.iter().any(|s| s.has_label(topic)) {
        return Err(unknown_topic(topic, corpus));
    }
    Ok(corpus
        .iter()
        .map(|s| {
            if s.has_label(topic) {
                Sample {
                    text: shuffle_chars(&s.text, shuffle_seed(seed, &s.id)),
                    ..s.clone()
                }
            } else {
                s.clone()
            }
        })
        .collect())
}

/// Line-preserving variant of [`corrupt_topic`] for JSONL streams: lines of
/// samples outside `topic` are copied byte for byte; corrupted lines keep
/// their field order and only change `text`.
pub fn corrupt_jsonl(
    reader: impl BufRead,
    mut writer: impl Write,
    topic: &str,
    seed: u64,
) -> Result<usize, CorpusError> {
    let mut lines = Vec::new();
    let mut corpus = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            lines.push((line, None));
            continue;
        }
        let sample = parse_sample_line(&line, line_no)?;
        if !ids.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId(sample.id));
        }
        lines.push((line, Some(corpus.len())));
        corpus.push(sample);
    }
    if !corpus.iter().any(|s| s.has_label(topic)) {
        return Err(unknown_topic(topic, &corpus));
    }

    let out_err = |e: io::Error| CorpusError::Io {
        path: "<output>".into(),
        source: e,
    };
    let mut corrupted = 0;
    for (line_no, (line, idx)) in lines.iter().enumerate() {
        let sample = idx.map(|i| &corpus[i]);
        match sample {
            Some(s) if s.has_label(topic) => {
                let mut value: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                        line: line_no + 1,
                        message: e.to_string(),
                    })?;
                value["text"] = serde_json::Value::String(shuffle_chars(
                    &s.text,
                    shuffle_seed(seed, &s.id),
                ));
                serde_json::to_writer(&mut writer, &value).map_err(io::Error::from).map_err(out_err)?;
                corrupted += 1;
            }
            _ => writer.write_all(line.as_bytes()).map_err(out_err)?,
        }
        writer.write_all(b"\n").map_err(out_err)?;
    }
    writer.flush().map_err(out_err)?;
    Ok(corrupted)
}

/// Stratum of a sample for splitting: its first label, or `""` if unlabeled.
fn stratum(sample: &Sample) -> &str {
    sample.labels.first().map(|l| l.as_str()).unwrap_or("")
}

/// Stratified split. Each stratum (first label) sends `ceil(fraction * n)` of
/// its samples to the held-out side. Both sides keep corpus order.
pub fn split_heldout(
    corpus: &[Sample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        strata.entry(stratum(s)).or_default().push(i);
    }
    let mut heldout = vec![false; corpus.len()];
    for (topic, mut members) in strata {
        if members.len() < 2 {
            return Err(CorpusError::TopicTooSmall {
                topic: topic.to_owned(),
                count: members.len(),
            });
        }
        // the epsilon keeps products like 0.1 * 30 from rounding up a whole sample
        let take = (fraction * members.len() as f64 - 1e-9).ceil() as usize;
        let mut rng = seed::rng_for(seed, &format!("split:{topic}"));
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            heldout[i] = true;
        }
    }
    let (held, train): (Vec<_>, Vec<_>) = corpus
        .iter()
        .zip(heldout)
        .partition(|(_, is_held)| *is_held);
    Ok((
        train.into_iter().map(|(s, _)| s.clone()).collect(),
        held.into_iter().map(|(s, _)| s.clone()).collect(),
    ))
}

/// Byte-level vocabulary: the sorted set of bytes seen in a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    bytes: Vec<u8>,
    #[serde(skip)]
    index: Option<Box<[Option<u16>; 256]>>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for Vocab {}

impl Vocab {
    pub fn from_bytes(bytes: impl IntoIterator<Item = u8>) -> Result<Self, CorpusError> {
        let set: BTreeSet<u8> = bytes.into_iter().collect();
        if set.is_empty() {
            return Err(CorpusError::EmptyVocab);
        }
        let mut vocab = Self {
            bytes: set.into_iter().collect(),
            index: None,
        };
        vocab.build_index();
        Ok(vocab)
    }

    pub fn from_corpus(corpus: &[Sample]) -> Result<Self, CorpusError> {
        Self::from_bytes(corpus.iter().flat_map(|s| s.text.bytes()))
    }

    fn build_index(&mut self) {
        let mut index = Box::new([None; 256]);
        for (i, &b) in self.bytes.iter().enumerate() {
            index[b as usize] = Some(i as u16);
        }
        self.index = Some(index);
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn ensure_index(&mut self) {
        if self.index.is_none() {
            self.build_index();
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn encode(&self, sample_id: &str, text: &str) -> Result<Vec<usize>, CorpusError> {
        let lookup = |b: u8| -> Option<usize> {
            match &self.index {
                Some(index) => index[b as usize].map(usize::from),
                None => self.bytes.binary_search(&b).ok(),
            }
        };
        text.bytes()
            .map(|b| {
                lookup(b).ok_or_else(|| CorpusError::OutOfVocab {
                    sample_id: sample_id.to_owned(),
                    byte: b,
                })
            })
            .collect()
    }
}

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::AnnotateError;

/// Built-in English stopwords removed before keyword scoring.
pub const STOPWORDS: [&str; 50] = [
    "the", "and", "for", "are", "but", "not", "you", "all", "any", "can", "had", "her", "was",
    "one", "our", "out", "has", "his", "how", "its", "may", "new", "now", "old", "see", "two",
    "who", "did", "get", "him", "let", "say", "she", "too", "use", "that", "with", "have", "this",
    "will", "your", "from", "they", "been", "were", "what", "when", "which", "their", "there",
];

/// Lowercases, splits on non-alphanumeric characters, drops tokens shorter
/// than two characters and stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2 && !STOPWORDS.contains(t))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub cluster_index: usize,
    pub keywords: Vec<Keyword>,
}

impl KeywordSet {
    pub fn terms(&self) -> Vec<String> {
        self.keywords.iter().map(|k| k.term.clone()).collect()
    }
}

/// Scores terms of each cluster-document (the concatenated tokens of its
/// members) by `tf * idf` with `tf = count / doc_len` and
/// `idf = ln((1 + C) / (1 + df)) + 1`. Keeps the `top_k` best per cluster,
/// ties broken by term.
pub fn tfidf_keywords(cluster_docs: &[Vec<String>], top_k: usize) -> Result<Vec<KeywordSet>, AnnotateError> {
    if cluster_docs.len() < 2 {
        return Err(AnnotateError::InvalidConfig(format!(
            "TF-IDF needs at least 2 clusters, got {}; use k >= 2",
            cluster_docs.len()
        )));
    }
    let c = cluster_docs.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in cluster_docs {
        let distinct: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for term in distinct {
            *df.entry(term).or_default() += 1;
        }
    }

    Ok(cluster_docs
        .iter()
        .enumerate()
        .map(|(cluster_index, doc)| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for term in doc {
                *counts.entry(term.as_str()).or_default() += 1;
            }
            let len = doc.len() as f64;
            let mut keywords: Vec<Keyword> = counts
                .into_iter()
                .map(|(term, count)| {
                    let idf = ((1.0 + c) / (1.0 + df[term] as f64)).ln() + 1.0;
                    Keyword {
                        term: term.to_owned(),
                        score: (count as f64 / len) * idf,
                    }
                })
                .collect();
            keywords.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.term.cmp(&b.term)));
            keywords.truncate(top_k);
            KeywordSet {
                cluster_index,
                keywords,
            }
        })
        .collect())
}

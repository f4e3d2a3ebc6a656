#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toremi::{BelowAverageMode, ReweighterConfig, Stage};

/// One sample of a random interval: its labels and raw loss.
#[derive(Debug, Clone)]
pub struct OracleSample {
    pub labels: Vec<String>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub label_losses: BTreeMap<String, f64>,
    pub average: f64,
    pub weights: BTreeMap<String, f64>,
}

/// Straight-line re-derivation of one interval finalization: per-label mean
/// loss, mean over labels, then the stage update for every observed label.
/// Deliberately avoids the library's helpers.
pub fn oracle_finalize(
    previous: &BTreeMap<String, f64>,
    samples: &[OracleSample],
    stage: Stage,
    alpha: f64,
    beta: f64,
    gamma: f64,
    literal: bool,
) -> OracleResult {
    // sums in record order, each label counted once per sample
    let mut sums: Vec<(String, f64, f64)> = Vec::new();
    for s in samples {
        let mut seen: Vec<&String> = Vec::new();
        for l in &s.labels {
            if seen.contains(&l) {
                continue;
            }
            seen.push(l);
            match sums.iter_mut().find(|(name, _, _)| name == l) {
                Some(entry) => {
                    entry.1 += s.loss;
                    entry.2 += 1.0;
                }
                None => sums.push((l.clone(), s.loss, 1.0)),
            }
        }
    }
    sums.sort_by(|a, b| a.0.cmp(&b.0));

    let mut label_losses = BTreeMap::new();
    let mut total = 0.0;
    for (name, sum, count) in &sums {
        let loss = sum / count;
        label_losses.insert(name.clone(), loss);
        total += loss;
    }
    let average = total / sums.len() as f64;

    let mut weights = previous.clone();
    for (name, loss) in &label_losses {
        let w = *previous.get(name).unwrap_or(&1.0);
        let gap = loss - average;
        let new = if stage == Stage::Stage1 {
            if *loss > average {
                let raised = w + alpha * gap;
                if raised > beta {
                    beta
                } else {
                    raised
                }
            } else {
                1.0
            }
        } else if *loss > average {
            let lowered = w - alpha * gap;
            if lowered < gamma {
                gamma
            } else {
                lowered
            }
        } else if literal {
            let moved = w + alpha * gap;
            let capped = if moved > beta { beta } else { moved };
            if capped < gamma {
                gamma
            } else {
                capped
            }
        } else {
            let raised = w + alpha * gap.abs();
            if raised > beta {
                beta
            } else {
                raised
            }
        };
        weights.insert(name.clone(), new);
    }
    OracleResult {
        label_losses,
        average,
        weights,
    }
}

pub const LABEL_POOL: [&str; 5] = ["Arts", "Health", "History", "Science", "Technology"];

/// Random interval: up to `max_samples` samples over up to `max_labels`
/// labels, each sample with 1-3 (possibly repeated) labels.
pub fn random_interval(rng: &mut ChaCha8Rng, max_labels: usize, max_samples: usize) -> Vec<OracleSample> {
    let n_labels = rng.random_range(1..=max_labels);
    let pool = &LABEL_POOL[..n_labels];
    let n = rng.random_range(1..=max_samples);
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=3);
            let labels = (0..k).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect();
            let loss = if rng.random_bool(0.1) {
                // exact ties with other samples
                2.0
            } else {
                rng.random_range(0.0..8.0)
            };
            OracleSample { labels, loss }
        })
        .collect()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ReweighterConfig {
    ReweighterConfig {
        alpha: rng.random_range(0.05..3.0),
        beta: rng.random_range(1.0..20.0),
        gamma: rng.random_range(0.01..1.0),
        interval_steps: 10,
        transition_step: 10 * rng.random_range(1..40u64),
        stage2_below_average_mode: if rng.random_bool(0.3) {
            BelowAverageMode::Literal
        } else {
            BelowAverageMode::Magnitude
        },
    }
}

pub const TFIDF_FIXTURE: [(usize, &str); 12] = [
    (0, "The striker scored a late goal and the football crowd roared."),
    (0, "A goal in extra time sent the football team to the final."),
    (0, "Tennis and football fans crowded the stadium for the final match."),
    (0, "The coach praised the striker after the match; the team won."),
    (1, "The new GPU doubles training throughput for neural networks."),
    (1, "Neural networks train faster on a GPU cluster with more memory."),
    (1, "Compilers and memory allocators matter for GPU kernels."),
    (1, "The cluster scheduler assigns GPU memory to training jobs."),
    (2, "Simmer the tomato sauce with garlic and basil for an hour."),
    (2, "Roast garlic, then blend it into the tomato soup with cream."),
    (2, "Fresh basil and tomato make a simple summer salad."),
    (2, "Bake the bread, then rub garlic on the warm slices."),
];

/// Brute force: for every distinct term of a cluster, count occurrences in
/// that cluster and the number of clusters containing it, score, then sort.
pub fn brute_force_top5(docs: &[Vec<String>]) -> Vec<Vec<(String, f64)>> {
    let c = docs.len() as f64;
    docs.iter()
        .map(|doc| {
            let mut terms: Vec<&String> = doc.iter().collect();
            terms.sort();
            terms.dedup();
            let mut scored: Vec<(String, f64)> = terms
                .into_iter()
                .map(|t| {
                    let count = doc.iter().filter(|x| *x == t).count() as f64;
                    let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                    (t.clone(), count / doc.len() as f64 * (((1.0 + c) / (1.0 + df)).ln() + 1.0))
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(5);
            scored
        })
        .collect()
}

/// Token lists of the three fixture clusters.
pub fn fixture_cluster_docs() -> Vec<Vec<String>> {
    let mut docs = vec![Vec::new(); 3];
    for (cluster, text) in TFIDF_FIXTURE {
        docs[cluster].extend(toremi::annotate::tokenize(text));
    }
    docs
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_toremi")
}

/// Runs the CLI in `dir` with a clean labeler environment.
pub fn toremi(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("TOREMI_LABELER_URL")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn toremi")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = toremi(dir, args);
    assert!(
        out.status.success(),
        "toremi {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Relative path and contents of every file below `root`, sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotateError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 8,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point, in input order.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment pass.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centroids[0]))
        .collect();
    // greedy variant: draw a few candidates, keep the one that lowers the
    // potential most
    let trials = 2 + (k as f64).ln() as usize;
    while centroids.len() < k {
        let (next, next_d2) = match WeightedIndex::new(&d2) {
            Ok(dist) => {
                let mut best: Option<(usize, Vec<f64>, f64)> = None;
                for _ in 0..trials {
                    let cand = dist.sample(rng);
                    let c = points[cand].as_ref();
                    let updated: Vec<f64> = d2
                        .iter()
                        .zip(points)
                        .map(|(d, p)| d.min(squared_distance(p.as_ref(), c)))
                        .collect();
                    let potential: f64 = updated.iter().sum();
                    if best.as_ref().is_none_or(|b| potential < b.2) {
                        best = Some((cand, updated, potential));
                    }
                }
                let (cand, updated, _) = best.expect("trials >= 2");
                (cand, updated)
            }
            // every point coincides with a centroid already
            Err(_) => {
                let cand = chosen.iter().position(|c| !c).expect("k <= n");
                (cand, d2.clone())
            }
        };
        chosen[next] = true;
        d2 = next_d2;
        centroids.push(points[next].as_ref().to_vec());
    }
    centroids
}

/// Assigns every point to its nearest centroid, then gives each empty
/// cluster the farthest point of a cluster with members to spare. Returns
/// the inertia.
fn assign<P: AsRef<[f64]>>(
    points: &[P],
    centroids: &mut [Vec<f64>],
    assignment: &mut [usize],
    counts: &mut [usize],
) -> f64 {
    let mut distances = Vec::with_capacity(points.len());
    counts.fill(0);
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p.as_ref(), centroids);
        assignment[i] = c;
        counts[c] += 1;
        distances.push(d);
    }
    for empty in 0..centroids.len() {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(b.cmp(&a)))
            .expect("k <= n leaves a cluster with spare points");
        counts[assignment[donor]] -= 1;
        counts[empty] += 1;
        assignment[donor] = empty;
        distances[donor] = 0.0;
        centroids[empty] = points[donor].as_ref().to_vec();
    }
    distances.iter().sum()
}

/// k-means++ seeding followed by Lloyd iterations. An empty cluster is
/// re-seeded with the point farthest from its current centroid.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], params: &KMeansParams) -> Result<ClusterAssignment, AnnotateError> {
    let n = points.len();
    let k = params.k;
    if k == 0 {
        return Err(AnnotateError::InvalidConfig("k must be at least 1".into()));
    }
    if k > n {
        return Err(AnnotateError::InvalidConfig(format!(
            "k = {k} exceeds the number of points ({n})"
        )));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(AnnotateError::InvalidConfig("points have differing dimensions".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut counts = vec![0usize; k];
    let mut history = vec![assign(points, &mut centroids, &mut assignment, &mut counts)];
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignment) {
            for (s, x) in sums[c].iter_mut().zip(p.as_ref()) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for (c, sum) in sums.into_iter().enumerate() {
            let mean: Vec<f64> = sum.into_iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(squared_distance(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        history.push(assign(points, &mut centroids, &mut assignment, &mut counts));
        if shift < params.tol {
            break;
        }
    }

    Ok(ClusterAssignment {
        k,
        centroids,
        assignment,
        inertia: *history.last().expect("at least one pass"),
        inertia_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: usize, seed: u64) -> KMeansParams {
        KMeansParams {
            k,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn separates_rectangle_corners() {
        let points = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        for seed in 0..10 {
            let result = kmeans(&points, &params(2, seed)).unwrap();
            assert_eq!(result.assignment[0], result.assignment[1]);
            assert_eq!(result.assignment[2], result.assignment[3]);
            assert_ne!(result.assignment[0], result.assignment[2]);
            assert!((result.inertia - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_point_per_cluster_has_zero_inertia() {
        let points = vec![vec![0.0], vec![3.0], vec![7.0], vec![7.5]];
        let result = kmeans(&points, &params(4, 1)).unwrap();
        assert_eq!(result.inertia, 0.0);
    }

    #[test]
    fn duplicate_points_still_yield_k_clusters() {
        let points = vec![vec![1.0, 1.0]; 5];
        let result = kmeans(&points, &params(3, 0)).unwrap();
        let used: std::collections::BTreeSet<_> = result.assignment.iter().collect();
        assert_eq!(used.len(), 3);
        assert_eq!(result.inertia, 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&points, &params(3, 0)).is_err());
        assert!(kmeans(&points, &params(0, 0)).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let points: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 1.7).sin(), (i as f64 * 0.3).cos()])
            .collect();
        assert_eq!(kmeans(&points, &params(4, 9)).unwrap(), kmeans(&points, &params(4, 9)).unwrap());
    }
}

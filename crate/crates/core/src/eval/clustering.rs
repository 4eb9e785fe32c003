//! Clustering on cosine distance and its extrinsic scores.
//!
//! All three methods work on row-normalized embeddings, where squared
//! Euclidean distance is monotone in cosine distance (`d^2 = 2 - 2 cos`).
//! Density methods mark noise as `-1`; both scores treat each noise point
//! as its own singleton cluster.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Per-embedding cluster ids; `-1` marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusteringResult {
    pub assignment: Vec<i32>,
}

/// K-means output with its convergence trace.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub result: ClusteringResult,
    /// Within-cluster sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

const KMEANS_MAX_ITER: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

fn normalized_rows(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    if embeddings.nrows() == 0 {
        return Err(Error::Config("clustering needs at least one embedding".into()));
    }
    let mut unit = embeddings.clone();
    for (i, mut row) in unit.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain(format!(
                "embedding {i} must have a nonzero finite norm for cosine clustering"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(unit)
}

fn squared_distance(a: &Array1<f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding on cosine-normalized inputs.
/// Deterministic for a given seed; ties go to the lowest index.
pub fn kmeans(embeddings: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansRun> {
    let points = normalized_rows(embeddings)?;
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k must lie in 1..={n}, got {k}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centers.push(points.row(first).to_owned());
    chosen[first] = true;
    let mut dist2: Vec<f64> =
        (0..n).map(|i| squared_distance(&centers[0], points.row(i))).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut picked = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    picked = i;
                    break;
                }
                target -= d;
            }
            picked
        } else {
            // All remaining points coincide with a center; take the first
            // unchosen index.
            (0..n).find(|&i| !chosen[i]).expect("k <= n leaves an unchosen point")
        };
        chosen[next] = true;
        let center = points.row(next).to_owned();
        for i in 0..n {
            dist2[i] = dist2[i].min(squared_distance(&center, points.row(i)));
        }
        centers.push(center);
    }

    let mut assignment = vec![0usize; n];
    let mut objective_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        // Assignment step, recording the objective for this partition.
        let mut objective = 0.0;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(center, points.row(i));
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
            objective += best.0;
        }
        objective_history.push(objective);

        // Update step.
        let dim = points.ncols();
        let mut sums = vec![Array1::<f64>::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums[assignment[i]] += &points.row(i);
            counts[assignment[i]] += 1;
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an emptied cluster with the point farthest from
                // its center (lowest index on ties).
                let mut far = (f64::NEG_INFINITY, 0usize);
                for i in 0..n {
                    let d = squared_distance(&centers[assignment[i]], points.row(i));
                    if d > far.0 {
                        far = (d, i);
                    }
                }
                let new_center = points.row(far.1).to_owned();
                movement = movement.max(squared_distance(&new_center, centers[c].view()).sqrt());
                centers[c] = new_center;
            } else {
                let new_center = &sums[c] / counts[c] as f64;
                movement = movement.max(squared_distance(&new_center, centers[c].view()).sqrt());
                centers[c] = new_center;
            }
        }
        if movement < KMEANS_TOL {
            break;
        }
    }

    Ok(KMeansRun {
        result: ClusteringResult {
            assignment: assignment.into_iter().map(|c| c as i32).collect(),
        },
        objective_history,
        iterations,
    })
}

/// Average-linkage agglomerative clustering on cosine distance, cut at `k`
/// clusters. Ties merge the lexicographically smallest pair.
pub fn ahc(embeddings: &Array2<f64>, k: usize) -> Result<ClusteringResult> {
    let points = normalized_rows(embeddings)?;
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k must lie in 1..={n}, got {k}")));
    }

    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let cos = points.row(i).dot(&points.row(j));
            let d = 1.0 - cos;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut active: Vec<bool> = vec![true; n];
    let mut size: Vec<usize> = vec![1; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut remaining = n;
    while remaining > k {
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && dist[i][j] < best.0 {
                    best = (dist[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        // Lance-Williams update for average linkage.
        for l in 0..n {
            if l != i && l != j && active[l] {
                let d = (size[i] as f64 * dist[i][l] + size[j] as f64 * dist[j][l])
                    / (size[i] + size[j]) as f64;
                dist[i][l] = d;
                dist[l][i] = d;
            }
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        size[i] += size[j];
        active[j] = false;
        remaining -= 1;
    }

    let mut assignment = vec![0i32; n];
    let mut next_id = 0i32;
    for i in 0..n {
        if active[i] {
            for &m in &members[i] {
                assignment[m] = next_id;
            }
            next_id += 1;
        }
    }
    Ok(ClusteringResult { assignment })
}

/// Density clustering on cosine distance (`1 - cos`); a point is core when
/// its eps-neighborhood (itself included) holds at least `min_pts` points.
/// Unreachable points keep the noise id `-1`.
pub fn dbscan(embeddings: &Array2<f64>, eps: f64, min_pts: usize) -> Result<ClusteringResult> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eps must be a nonnegative real, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::Domain("min_pts must be at least 1".into()));
    }
    let points = normalized_rows(embeddings)?;
    let n = points.nrows();

    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut list = Vec::new();
        for j in 0..n {
            let d = 1.0 - points.row(i).dot(&points.row(j));
            if d <= eps {
                list.push(j);
            }
        }
        neighbors.push(list);
    }
    let core: Vec<bool> = neighbors.iter().map(|l| l.len() >= min_pts).collect();

    let mut assignment = vec![-1i32; n];
    let mut cluster = 0i32;
    for start in 0..n {
        if assignment[start] != -1 || !core[start] {
            continue;
        }
        // Breadth-first expansion from an unassigned core point.
        assignment[start] = cluster;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if assignment[q] == -1 {
                    assignment[q] = cluster;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        cluster += 1;
    }
    Ok(ClusteringResult { assignment })
}

/// Replaces each `-1` with a fresh singleton id above the existing range.
fn noise_as_singletons(labels: &[i32]) -> Vec<i32> {
    let mut next = labels.iter().copied().max().unwrap_or(0).max(0) + 1;
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                let id = next;
                next += 1;
                id
            } else {
                l
            }
        })
        .collect()
}

fn entropy(counts: &BTreeMap<i32, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the arithmetic-mean normalization
/// `2 I(A; B) / (H(A) + H(B))`. Noise points count as singleton clusters;
/// two trivial single-cluster partitions score 1.
pub fn nmi(a: &[i32], b: &[i32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "assignment lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Domain("assignments must be non-empty".into()));
    }
    let a = noise_as_singletons(a);
    let b = noise_as_singletons(b);
    let n = a.len() as f64;
    // Ordered maps fix the summation order, keeping scores bit-identical
    // across runs and processes.
    let mut joint: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    let mut marg_a: BTreeMap<i32, usize> = BTreeMap::new();
    let mut marg_b: BTreeMap<i32, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(&b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *marg_a.entry(x).or_insert(0) += 1;
        *marg_b.entry(y).or_insert(0) += 1;
    }
    let h_a = entropy(&marg_a, n);
    let h_b = entropy(&marg_b, n);
    if h_a <= 0.0 && h_b <= 0.0 {
        return Ok(1.0);
    }
    let mut mutual = 0.0;
    for (&(x, y), &c) in &joint {
        let p_xy = c as f64 / n;
        let p_x = marg_a[&x] as f64 / n;
        let p_y = marg_b[&y] as f64 / n;
        mutual += p_xy * (p_xy / (p_x * p_y)).ln();
    }
    Ok((2.0 * mutual / (h_a + h_b)).clamp(0.0, 1.0))
}

/// BCubed precision, recall, and their harmonic mean. Per item, precision is
/// the fraction of its predicted cluster sharing its true class and recall
/// the fraction of its true class sharing its predicted cluster; both are
/// averaged over items. Noise points count as singleton clusters.
pub fn bcubed_f(pred: &[i32], truth: &[i32]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Domain(format!(
            "assignment lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("assignments must be non-empty".into()));
    }
    let pred = noise_as_singletons(pred);
    let truth = noise_as_singletons(truth);
    let mut joint: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    let mut cluster_size: BTreeMap<i32, usize> = BTreeMap::new();
    let mut class_size: BTreeMap<i32, usize> = BTreeMap::new();
    for (&c, &t) in pred.iter().zip(&truth) {
        *joint.entry((c, t)).or_insert(0) += 1;
        *cluster_size.entry(c).or_insert(0) += 1;
        *class_size.entry(t).or_insert(0) += 1;
    }
    let n = pred.len() as f64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (&c, &t) in pred.iter().zip(&truth) {
        let overlap = joint[&(c, t)] as f64;
        precision += overlap / cluster_size[&c] as f64;
        recall += overlap / class_size[&t] as f64;
    }
    precision /= n;
    recall /= n;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f))
}

/// One clustering method scored against ground truth, exportable as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct ClusteringReport {
    pub method: String,
    pub params: serde_json::Value,
    pub nmi: f64,
    pub bcubed_precision: f64,
    pub bcubed_recall: f64,
    pub bcubed_f: f64,
}

impl ClusteringReport {
    pub fn from_scores(
        method: &str,
        params: serde_json::Value,
        pred: &[i32],
        truth: &[i32],
    ) -> Result<Self> {
        let nmi_score = nmi(pred, truth)?;
        let (precision, recall, f) = bcubed_f(pred, truth)?;
        Ok(ClusteringReport {
            method: method.to_string(),
            params,
            nmi: nmi_score,
            bcubed_precision: precision,
            bcubed_recall: recall,
            bcubed_f: f,
        })
    }
}

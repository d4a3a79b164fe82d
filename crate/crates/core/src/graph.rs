//! Truncated kNN similarity graph with per-node Gaussian bandwidths.
//!
//! Weights are directed: w(x,y) = exp(-|x-y|^2 / sigma(x)^2) where sigma(x)
//! is the distance from x to its n-th nearest neighbor. Symmetry is restored
//! only at system assembly through w(x,y) + w(y,x).

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::rng;
use crate::sparse::SparseMatrix;

/// m retained neighbors; the n-th neighbor's distance sets the bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KnnParams {
    pub m: usize,
    pub n: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams { m: 30, n: 15 }
    }
}

impl KnnParams {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.n == 0 || self.n > self.m {
            return Err(Error::parameter(format!(
                "need 1 <= n <= m, got (m, n) = ({}, {})",
                self.m, self.n
            )));
        }
        if self.m >= num_nodes {
            return Err(Error::parameter(format!(
                "m = {} must be smaller than the node count {num_nodes}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Directed kNN graph; neighbor lists are sorted by ascending distance with
/// ties broken by node index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    num_nodes: usize,
    params: KnnParams,
    neighbors: Vec<usize>,
    distances: Vec<f64>,
    weights: Vec<f64>,
    sigma: Vec<f64>,
}

impl KnnGraph {
    fn from_sorted_lists(
        num_nodes: usize,
        params: KnnParams,
        lists: Vec<Vec<(f64, usize)>>,
    ) -> Self {
        let m = params.m;
        let mut neighbors = vec![0usize; num_nodes * m];
        let mut distances = vec![0.0; num_nodes * m];
        let mut weights = vec![0.0; num_nodes * m];
        let mut sigma = vec![1.0; num_nodes];

        for (i, list) in lists.into_iter().enumerate() {
            debug_assert!(list.len() >= m, "node {i} has only {} candidates", list.len());
            for (k, &(d, j)) in list.iter().take(m).enumerate() {
                neighbors[i * m + k] = j;
                distances[i * m + k] = d;
            }
            let nth = distances[i * m + params.n - 1];
            sigma[i] = if nth > 0.0 {
                nth
            } else {
                // duplicate points: fall back to the smallest positive
                // neighbor distance, else 1
                distances[i * m..(i + 1) * m]
                    .iter()
                    .copied()
                    .find(|&d| d > 0.0)
                    .unwrap_or(1.0)
            };
            let s2 = sigma[i] * sigma[i];
            for k in 0..m {
                let d = distances[i * m + k];
                weights[i * m + k] = (-(d * d) / s2).exp();
            }
        }

        KnnGraph {
            num_nodes,
            params,
            neighbors,
            distances,
            weights,
            sigma,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn params(&self) -> KnnParams {
        self.params
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node * self.params.m..(node + 1) * self.params.m]
    }

    pub fn distances(&self, node: usize) -> &[f64] {
        &self.distances[node * self.params.m..(node + 1) * self.params.m]
    }

    pub fn weights(&self, node: usize) -> &[f64] {
        &self.weights[node * self.params.m..(node + 1) * self.params.m]
    }

    pub fn sigma(&self, node: usize) -> f64 {
        self.sigma[node]
    }

    /// One directed edge per line: "src dst dist weight".
    pub fn dump_edges(&self, mut out: impl Write) -> std::io::Result<()> {
        for i in 0..self.num_nodes {
            for k in 0..self.params.m {
                writeln!(
                    out,
                    "{} {} {} {}",
                    i,
                    self.neighbors[i * self.params.m + k],
                    self.distances[i * self.params.m + k],
                    self.weights[i * self.params.m + k]
                )?;
            }
        }
        Ok(())
    }
}

/// Smallest `m` entries of `(distance, index)` pairs, ordered by distance
/// then index.
fn take_m_nearest(mut candidates: Vec<(f64, usize)>, m: usize) -> Vec<(f64, usize)> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0)
            .expect("non-finite distance")
            .then(a.1.cmp(&b.1))
    };
    if candidates.len() > m {
        candidates.select_nth_unstable_by(m - 1, cmp);
        candidates.truncate(m);
    }
    candidates.sort_by(cmp);
    candidates
}

fn validate_features(features: &FeatureMatrix) -> Result<()> {
    if !features.is_finite() {
        return Err(Error::parameter("features contain non-finite values"));
    }
    Ok(())
}

/// Exact Euclidean m-nearest neighbors per node, self excluded.
///
/// Distances come from the Gram identity |x-y|^2 = |x|^2 + |y|^2 - 2 x.y,
/// evaluated in row blocks so the full pairwise matrix is never materialized.
pub fn knn_exact(features: &FeatureMatrix, params: KnnParams) -> Result<KnnGraph> {
    let n = features.rows();
    params.validate(n)?;
    validate_features(features)?;

    let sq_norms = features.squared_row_norms();
    let features_t = features.transpose();
    let block = 256usize;

    let mut lists: Vec<Vec<(f64, usize)>> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let stop = (start + block).min(n);
        let rows: Vec<usize> = (start..stop).collect();
        let gram = features.select_rows(&rows).matmul(&features_t);
        let mut block_lists: Vec<Vec<(f64, usize)>> = (0..rows.len())
            .into_par_iter()
            .map(|bi| {
                let i = start + bi;
                let grow = gram.row(bi);
                let cands: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d2 = (sq_norms[i] + sq_norms[j] - 2.0 * grow[j]).max(0.0);
                        (d2.sqrt(), j)
                    })
                    .collect();
                take_m_nearest(cands, params.m)
            })
            .collect();
        lists.append(&mut block_lists);
        start = stop;
    }

    Ok(KnnGraph::from_sorted_lists(n, params, lists))
}

/// Approximate m-nearest neighbors via randomized projection trees.
///
/// Candidates for a node are the union of its leaf mates over `probes`
/// independent trees (leaves never shrink below m+1 points); the union is
/// then searched exactly. A tree whose root already fits in one leaf keeps
/// every point, so small inputs reproduce [`knn_exact`].
pub fn knn_approx(
    features: &FeatureMatrix,
    params: KnnParams,
    probes: usize,
    seed: u64,
) -> Result<KnnGraph> {
    let n = features.rows();
    params.validate(n)?;
    validate_features(features)?;
    if probes == 0 {
        return Err(Error::parameter("probes must be at least 1"));
    }

    // wide leaves keep per-tree recall high in high-dimensional feature
    // spaces; the m+1 floor guarantees full candidate lists
    let leaf_cap = (8 * (params.m + 1)).max(64);

    // leaf label per node, per tree
    let leaf_labels: Vec<Vec<usize>> = (0..probes)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, &[0x7e, t as u64]);
            let mut labels = vec![0usize; n];
            let mut next_leaf = 0usize;
            let all: Vec<usize> = (0..n).collect();
            split_recursive(
                features,
                all,
                leaf_cap,
                &mut rng,
                &mut labels,
                &mut next_leaf,
            );
            labels
        })
        .collect();

    // group leaf members per tree for candidate lookup
    let memberships: Vec<Vec<Vec<usize>>> = leaf_labels
        .iter()
        .map(|labels| {
            let leaves = labels.iter().max().copied().unwrap_or(0) + 1;
            let mut groups = vec![Vec::new(); leaves];
            for (i, &l) in labels.iter().enumerate() {
                groups[l].push(i);
            }
            groups
        })
        .collect();

    // same Gram identity as knn_exact (identical accumulation order), so an
    // exhaustive candidate set reproduces knn_exact bitwise
    let sq_norms = features.squared_row_norms();
    let lists: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cands: Vec<usize> = Vec::with_capacity(probes * leaf_cap);
            for (labels, groups) in leaf_labels.iter().zip(&memberships) {
                cands.extend_from_slice(&groups[labels[i]]);
            }
            cands.sort_unstable();
            cands.dedup();
            let xi = features.row(i);
            let scored: Vec<(f64, usize)> = cands
                .into_iter()
                .filter(|&j| j != i)
                .map(|j| {
                    let dot: f64 = xi
                        .iter()
                        .zip(features.row(j))
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let d2 = (sq_norms[i] + sq_norms[j] - 2.0 * dot).max(0.0);
                    (d2.sqrt(), j)
                })
                .collect();
            take_m_nearest(scored, params.m)
        })
        .collect();

    Ok(KnnGraph::from_sorted_lists(n, params, lists))
}

fn split_recursive(
    features: &FeatureMatrix,
    members: Vec<usize>,
    leaf_cap: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    labels: &mut [usize],
    next_leaf: &mut usize,
) {
    if members.len() <= leaf_cap {
        let leaf = *next_leaf;
        *next_leaf += 1;
        for &i in &members {
            labels[i] = leaf;
        }
        return;
    }
    // data-aware split direction: the difference of two random members
    // tracks the local spread far better than an isotropic direction when
    // the points live on a low-dimensional manifold
    let dim = features.cols();
    let a = members[rng.random_range(0..members.len())];
    let mut b = members[rng.random_range(0..members.len())];
    for _ in 0..8 {
        if b != a {
            break;
        }
        b = members[rng.random_range(0..members.len())];
    }
    let mut direction: Vec<f64> = features
        .row(a)
        .iter()
        .zip(features.row(b))
        .map(|(&xa, &xb)| xa - xb)
        .collect();
    let norm: f64 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut direction {
            *v /= norm;
        }
    } else {
        // coincident picks: fall back to a deterministic axis direction
        direction = vec![0.0; dim];
        direction[rng.random_range(0..dim)] = 1.0;
    }

    let mut projected: Vec<(f64, usize)> = members
        .iter()
        .map(|&i| {
            let p: f64 = features
                .row(i)
                .iter()
                .zip(&direction)
                .map(|(&x, &d)| x * d)
                .sum();
            (p, i)
        })
        .collect();
    let mid = projected.len() / 2;
    projected.select_nth_unstable_by(mid, |a, b| {
        a.0.partial_cmp(&b.0).expect("non-finite projection").then(a.1.cmp(&b.1))
    });
    let right: Vec<usize> = projected.split_off(mid).into_iter().map(|(_, i)| i).collect();
    let left: Vec<usize> = projected.into_iter().map(|(_, i)| i).collect();
    split_recursive(features, left, leaf_cap, rng, labels, next_leaf);
    split_recursive(features, right, leaf_cap, rng, labels, next_leaf);
}

/// Sparse matrix S with S[x][y] = w(x,y) + w(y,x); a missing directed edge
/// contributes 0, so the pattern is the union of directed edges and S is
/// symmetric by construction.
pub fn symmetrized_weights(graph: &KnnGraph) -> SparseMatrix {
    let n = graph.num_nodes();
    let mut triplets = Vec::with_capacity(2 * n * graph.params().m);
    for x in 0..n {
        for (&y, &w) in graph.neighbors(x).iter().zip(graph.weights(x)) {
            triplets.push((x, y, w));
            triplets.push((y, x, w));
        }
    }
    SparseMatrix::from_triplets(n, n, triplets).expect("edge indices are in range")
}

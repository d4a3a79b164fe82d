//! Independent oracles for integration tests: dense direct solves of the
//! literally-assembled interpolation equations, a dense Jacobi eigensolver,
//! and deterministic random-instance generators. Nothing here touches the
//! sparse/CG implementation path it is used to check.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use laplace_net_core::data::{one_hot, TemplateSet};
use laplace_net_core::graph::KnnGraph;
use laplace_net_core::matrix::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting; `b` holds one right-hand side
/// per column. Panics on a singular pivot (oracle instances must avoid it).
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let rhs = b[0].len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        assert!(a[pivot_row][col].abs() > 1e-14, "singular oracle system");
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            for k in 0..rhs {
                b[row][k] -= factor * b[col][k];
            }
        }
    }
    let mut x = vec![vec![0.0; rhs]; n];
    for row in (0..n).rev() {
        for k in 0..rhs {
            let mut acc = b[row][k];
            for col in (row + 1)..n {
                acc -= a[row][col] * x[col][k];
            }
            x[row][k] = acc / a[row][row];
        }
    }
    x
}

/// Dense directed-weight lookup table from a kNN graph.
pub fn directed_weights(graph: &KnnGraph) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    let mut w = vec![vec![0.0; n]; n];
    for x in 0..n {
        for (&y, &wt) in graph.neighbors(x).iter().zip(graph.weights(x)) {
            w[x][y] = wt;
        }
    }
    w
}

/// Literal dense assembly of the harmonic Euler-Lagrange system: for each
/// unlabeled x, sum_y (w(x,y) + w(y,x)) (u(x) - u(y)) = 0; labeled rows are
/// pinned to their labels. `mu` > 0 additionally adds the up-weighted
/// template term mu * sum_{y in te} w(y,x) (u(x) - u(y)).
pub fn assemble_dense_system(
    graph: &KnnGraph,
    template: &TemplateSet,
    template_indices: &[usize],
    mu: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = graph.num_nodes();
    let classes = template.num_classes();
    let w = directed_weights(graph);
    let labeled: std::collections::HashMap<usize, usize> = template_indices
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, k))
        .collect();

    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![vec![0.0; classes]; n];
    for x in 0..n {
        if let Some(&k) = labeled.get(&x) {
            a[x][x] = 1.0;
            b[x].copy_from_slice(template.labels.row(k));
            continue;
        }
        for y in 0..n {
            if y == x {
                continue;
            }
            let coupling = w[x][y] + w[y][x];
            if coupling > 0.0 {
                a[x][x] += coupling;
                a[x][y] -= coupling;
            }
        }
        if mu > 0.0 {
            for &ty in template_indices {
                let wyx = w[ty][x];
                if wyx > 0.0 {
                    a[x][x] += mu * wyx;
                    a[x][ty] -= mu * wyx;
                }
            }
        }
    }
    (a, b)
}

/// Gaussian weights underflow on outlier clusters, leaving structurally
/// connected but numerically singular systems; oracle instances require a
/// healthy minimum pivot in the literal dense assembly.
pub fn well_conditioned(
    graph: &KnnGraph,
    template: &TemplateSet,
    template_indices: &[usize],
) -> bool {
    let (mut a, _) = assemble_dense_system(graph, template, template_indices, 0.0);
    let n = a.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot_row][col].abs() < 1e-6 {
            return false;
        }
        a.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    true
}

/// True when every node can reach a template node over the symmetrized
/// pattern (the regime where the interpolation systems are non-singular).
pub fn fully_labeled_reachable(graph: &KnnGraph, template_indices: &[usize]) -> bool {
    let n = graph.num_nodes();
    let mut adjacency = vec![Vec::new(); n];
    for x in 0..n {
        for &y in graph.neighbors(x) {
            adjacency[x].push(y);
            adjacency[y].push(x);
        }
    }
    let mut seen = vec![false; n];
    let mut stack: Vec<usize> = template_indices.to_vec();
    for &i in template_indices {
        seen[i] = true;
    }
    while let Some(node) = stack.pop() {
        for &next in &adjacency[node] {
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Deterministic random interpolation instance: N points in `dim`
/// dimensions, `classes` classes, a labeled fraction, and a kNN graph.
pub struct RandomInstance {
    pub graph: KnnGraph,
    pub template: TemplateSet,
    pub template_indices: Vec<usize>,
    #[allow(dead_code)]
    pub features: Matrix,
}

pub fn random_instance(seed: u64, max_nodes: usize) -> RandomInstance {
    use laplace_net_core::graph::{knn_exact, KnnParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(12..=max_nodes);
    let classes = rng.random_range(2..=4usize);
    let dim = rng.random_range(2..=5usize);
    let m = rng.random_range(3..=6usize).min(n - 1);
    let knn = KnnParams {
        m,
        n: (m / 2).max(1),
    };
    let features = Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
    let graph = knn_exact(&features, knn).unwrap();

    let labeled_fraction = rng.random_range(0.1..0.4);
    let labeled_count = ((n as f64 * labeled_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut template_indices: Vec<usize> = order.into_iter().take(labeled_count).collect();
    template_indices.sort_unstable();

    // labels: random classes, each class represented at least once when the
    // template is large enough
    let template_classes: Vec<usize> = template_indices
        .iter()
        .enumerate()
        .map(|(k, _)| {
            if k < classes {
                k
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    let template = TemplateSet::new(
        features.select_rows(&template_indices),
        one_hot(&template_classes, classes),
    )
    .unwrap();

    RandomInstance {
        graph,
        template,
        template_indices,
        features,
    }
}

/// Dense symmetric eigendecomposition (Jacobi rotations), ascending order.
pub fn jacobi_eigh(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off = f64::max(off, a[i][j].abs());
            }
        }
        if off < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-15 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

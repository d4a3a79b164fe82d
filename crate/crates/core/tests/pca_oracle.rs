//! PCA versus a dense symmetric eigendecomposition oracle.

#![allow(clippy::needless_range_loop)]

mod common;

use common::jacobi_eigh;
use laplace_net_core::matrix::Matrix;
use laplace_net_core::pca::pca2d;
use rand::Rng;

fn covariance(features: &Matrix) -> Vec<Vec<f64>> {
    let n = features.rows();
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for row in features.row_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in features.row_iter() {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n as f64 - 1.0;
        }
    }
    cov
}

#[test]
fn explained_variance_matches_dense_eigendecomposition() {
    for seed in [3u64, 11, 29] {
        let mut rng = laplace_net_core::rng::stream(seed, &[0x9c]);
        let n = 120;
        let d = 6;
        // anisotropic data: per-dimension scales spread the spectrum
        let scales: Vec<f64> = (0..d).map(|k| 0.5 + 1.7 * k as f64).collect();
        let features = Matrix::from_fn(n, d, |_, j| scales[j] * rng.random_range(-1.0..1.0));

        let pca = pca2d(&features, 1e-12, 200_000).unwrap();
        let (eigenvalues, eigenvectors) = jacobi_eigh(&covariance(&features));

        // top-2 eigenvalues (ascending order from the oracle)
        let top = eigenvalues[d - 1];
        let second = eigenvalues[d - 2];
        let rel1 = (pca.explained_variance[0] - top).abs() / top;
        let rel2 = (pca.explained_variance[1] - second).abs() / second;
        assert!(rel1 <= 1e-6, "seed {seed}: top eigenvalue off by {rel1:.2e}");
        assert!(rel2 <= 1e-6, "seed {seed}: second eigenvalue off by {rel2:.2e}");

        // directions agree up to sign
        for (component, oracle_col) in pca.components.iter().zip([d - 1, d - 2]) {
            let dot: f64 = component
                .iter()
                .zip(&eigenvectors[oracle_col])
                .map(|(&a, &b)| a * b)
                .sum();
            assert!(dot.abs() >= 0.999999, "seed {seed}: |cos| = {}", dot.abs());
        }
    }
}

//! Top-2 principal components by power iteration with deflation, for 2-D
//! feature visualization. The covariance is never materialized; its action
//! is computed as centered Gram products, so wide feature matrices stay
//! cheap.

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Matrix};

#[derive(Debug, Clone)]
pub struct Pca2d {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, largest variance first.
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub explained_variance: [f64; 2],
}

impl Pca2d {
    /// Projects rows onto the two components (after mean-centering).
    pub fn project(&self, features: &FeatureMatrix) -> Matrix {
        let mut out = Matrix::zeros(features.rows(), 2);
        for (i, row) in features.row_iter().enumerate() {
            for (k, component) in self.components.iter().enumerate() {
                out[(i, k)] = row
                    .iter()
                    .zip(&self.mean)
                    .zip(component)
                    .map(|((&x, &m), &c)| (x - m) * c)
                    .sum();
            }
        }
        out
    }
}

/// y = Cov v = X_c^T (X_c v) / (n - 1), with optional deflation of an
/// already-extracted eigenpair.
fn cov_matvec(
    centered: &Matrix,
    v: &[f64],
    deflate: Option<(&[f64], f64)>,
) -> Vec<f64> {
    let n = centered.rows();
    let xv: Vec<f64> = centered
        .row_iter()
        .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect();
    let mut out = vec![0.0; centered.cols()];
    for (row, &xvi) in centered.row_iter().zip(&xv) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * xvi;
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for o in &mut out {
        *o *= scale;
    }
    if let Some((dir, lambda)) = deflate {
        let dot: f64 = dir.iter().zip(v).map(|(&a, &b)| a * b).sum();
        for (o, &d) in out.iter_mut().zip(dir) {
            *o -= lambda * dot * d;
        }
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn power_iterate(
    centered: &Matrix,
    deflate: Option<(&[f64], f64)>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = centered.cols();
    // fixed deterministic start, extremely unlikely to be orthogonal to the
    // leading eigenvector
    let mut v: Vec<f64> = (0..d).map(|i| (0.7 + i as f64).sin()).collect();
    if let Some((dir, _)) = deflate {
        let dot: f64 = dir.iter().zip(&v).map(|(&a, &b)| a * b).sum();
        for (x, &c) in v.iter_mut().zip(dir) {
            *x -= dot * c;
        }
    }
    normalize(&mut v);

    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let mut next = cov_matvec(centered, &v, deflate);
        if let Some((dir, _)) = deflate {
            let dot: f64 = dir.iter().zip(&next).map(|(&a, &b)| a * b).sum();
            for (x, &c) in next.iter_mut().zip(dir) {
                *x -= dot * c;
            }
        }
        let next_lambda = normalize(&mut next);
        if next_lambda == 0.0 {
            return Ok((v, 0.0)); // zero operator: any direction, variance 0
        }
        let converged = (next_lambda - lambda).abs() <= tol * next_lambda.max(1.0);
        v = next;
        lambda = next_lambda;
        if converged {
            return Ok((v, lambda));
        }
    }
    Err(Error::numeric(format!(
        "power iteration did not converge within {max_iters} iterations"
    )))
}

/// Mean-centers the features and extracts the top two principal components.
pub fn pca2d(features: &FeatureMatrix, tol: f64, max_iters: usize) -> Result<Pca2d> {
    if features.rows() < 2 {
        return Err(Error::usage("pca needs at least 2 samples"));
    }
    if features.cols() < 2 {
        return Err(Error::usage("pca needs at least 2 feature dimensions"));
    }
    let n = features.rows();
    let mut mean = vec![0.0; features.cols()];
    for row in features.row_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = Matrix::from_fn(n, features.cols(), |i, j| features[(i, j)] - mean[j]);

    let total_variance: f64 = centered.data().iter().map(|&v| v * v).sum::<f64>() / (n as f64 - 1.0);
    if total_variance <= 0.0 {
        return Err(Error::usage("zero variance: all samples identical"));
    }

    let (first, lambda1) = power_iterate(&centered, None, tol, max_iters)?;
    let (second, lambda2) = power_iterate(&centered, Some((&first, lambda1)), tol, max_iters)?;

    Ok(Pca2d {
        mean,
        components: [first, second],
        explained_variance: [lambda1, lambda2],
    })
}

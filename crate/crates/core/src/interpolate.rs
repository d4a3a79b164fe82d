//! Harmonic-extension and weighted nonlocal Laplacian label interpolation.
//!
//! Both interpolators reduce to one symmetric positive-definite system over
//! the unlabeled nodes, shared by every class column: boundary (template)
//! rows are pinned to their labels and moved to the right-hand side. The
//! weighted variant additionally up-weights template couplings by the factor
//! |X|/|X^te| - 1, which keeps interpolation stable when few nodes are
//! labeled; its template term uses the directed weight w(y,x) from the
//! template node's own bandwidth, exactly as the symmetrized system is
//! assembled from w(x,y) + w(y,x).

use std::io::Write;

use rayon::prelude::*;

use crate::data::TemplateSet;
use crate::error::{Error, Result};
use crate::graph::{symmetrized_weights, KnnGraph};
use crate::matrix::{FeatureMatrix, Matrix};
use crate::sparse::SparseMatrix;

/// Interpolated label scores for every node; template rows equal their
/// one-hot labels exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationResult {
    pub u: Matrix,
}

impl InterpolationResult {
    /// Scores restricted to the given rows (e.g. the query block of a
    /// combined query/template node ordering).
    pub fn select_rows(&self, rows: &[usize]) -> InterpolationResult {
        InterpolationResult {
            u: self.u.select_rows(rows),
        }
    }

    /// CSV with header `node_id,score_class_0,...,predicted_class`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "node_id")?;
        for c in 0..self.u.cols() {
            write!(out, ",score_class_{c}")?;
        }
        writeln!(out, ",predicted_class")?;
        let predictions = predict(self);
        for (i, row) in self.u.row_iter().enumerate() {
            write!(out, "{i}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", predictions[i])?;
        }
        Ok(())
    }
}

/// Solver configuration shared by the interpolation entry points.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct WnllConfig {
    /// Replaces the template up-weighting factor |X|/|X^te| - 1.
    pub mu_override: Option<f64>,
    /// Relative residual target for the conjugate-gradient solve.
    pub solver_tol: f64,
    /// Iteration cap; defaults to 10 * N when absent.
    pub max_iters: Option<usize>,
}

impl Default for WnllConfig {
    fn default() -> Self {
        WnllConfig {
            mu_override: None,
            solver_tol: 1e-10,
            max_iters: None,
        }
    }
}

impl WnllConfig {
    fn validate(&self) -> Result<()> {
        if !(self.solver_tol > 0.0) {
            return Err(Error::parameter("solver_tol must be positive"));
        }
        if let Some(mu) = self.mu_override {
            if !(mu >= 0.0) {
                return Err(Error::parameter("mu_override must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Compactly supported kernel profile, evaluated on a scaled argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KernelProfile {
    /// 1 - r/support on [0, support], 0 beyond.
    Hat,
    /// 1 on [0, support], 0 beyond.
    Indicator,
}

impl KernelProfile {
    fn eval(&self, r: f64, support: f64) -> f64 {
        if r > support {
            return 0.0;
        }
        match self {
            KernelProfile::Hat => 1.0 - r / support,
            KernelProfile::Indicator => 1.0,
        }
    }
}

/// Kernels of the generalized interpolation: R_delta on squared-distance
/// argument |x-y|^2 / (4 delta^2) with support [0,1], K_delta with support
/// [0, r0], both normalized by C_delta = (4 pi delta^2)^(-k/2).
///
/// C_delta multiplies every term of the interpolation equation, so it cancels
/// from the solution; it is retained so kernel evaluations match their
/// definition and the mu balance reads as stated.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    pub delta: f64,
    pub mu: f64,
    pub r0: f64,
    pub r_profile: KernelProfile,
    pub k_profile: KernelProfile,
    /// Intrinsic dimension k in the C_delta normalizer.
    pub intrinsic_dim: usize,
}

impl KernelSpec {
    pub fn new(delta: f64, mu: f64, intrinsic_dim: usize) -> Result<Self> {
        let spec = KernelSpec {
            delta,
            mu,
            r0: 2.0,
            r_profile: KernelProfile::Hat,
            k_profile: KernelProfile::Hat,
            intrinsic_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::parameter("delta must be positive"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::parameter("mu must be positive"));
        }
        if !(self.r0 >= 2.0) {
            return Err(Error::parameter("r0 must be at least 2"));
        }
        Ok(())
    }

    pub fn c_delta(&self) -> f64 {
        let four_pi_d2 = 4.0 * std::f64::consts::PI * self.delta * self.delta;
        four_pi_d2.powf(-(self.intrinsic_dim as f64) / 2.0)
    }

    fn scaled_arg(&self, squared_dist: f64) -> f64 {
        squared_dist / (4.0 * self.delta * self.delta)
    }

    pub fn r_delta(&self, squared_dist: f64) -> f64 {
        self.c_delta() * self.r_profile.eval(self.scaled_arg(squared_dist), 1.0)
    }

    pub fn k_delta(&self, squared_dist: f64) -> f64 {
        self.c_delta() * self.k_profile.eval(self.scaled_arg(squared_dist), self.r0)
    }
}

/// Jacobi-preconditioned conjugate gradient, one solve per right-hand-side
/// column. The system must be symmetric positive (semi-)definite with a
/// strictly positive diagonal on every row.
pub fn solve_spd(
    system: &SparseMatrix,
    rhs: &Matrix,
    tol: f64,
    max_iters: usize,
) -> Result<Matrix> {
    let n = system.n_rows();
    if system.n_cols() != n {
        return Err(Error::structure(format!(
            "system is {}x{}, expected square",
            n,
            system.n_cols()
        )));
    }
    if rhs.rows() != n {
        return Err(Error::structure(format!(
            "rhs has {} rows for a {}-row system",
            rhs.rows(),
            n
        )));
    }
    let diag = system.diagonal();
    if let Some(row) = diag.iter().position(|&d| d <= 0.0) {
        return Err(Error::structure(format!(
            "non-positive diagonal {} at row {row}",
            diag[row]
        )));
    }

    let rhs_t = rhs.transpose();
    let columns: Vec<Result<Vec<f64>>> = (0..rhs.cols())
        .into_par_iter()
        .map(|c| cg_single(system, &diag, rhs_t.row(c), tol, max_iters))
        .collect();

    let mut out = Matrix::zeros(n, rhs.cols());
    for (c, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

fn cg_single(
    system: &SparseMatrix,
    diag: &[f64],
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }

    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(&ri, &di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();

    let mut residual = b_norm;
    for _ in 0..max_iters {
        if residual / b_norm <= tol {
            return Ok(x);
        }
        let ap = system.matvec(&p);
        let p_ap: f64 = p.iter().zip(&ap).map(|(&a, &b)| a * b).sum();
        if p_ap <= 0.0 {
            return Err(Error::numeric(format!(
                "conjugate gradient curvature {p_ap} is not positive; system not SPD"
            )));
        }
        let alpha = rz / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        residual = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_new;
    }
    if residual / b_norm <= tol {
        Ok(x)
    } else {
        Err(Error::numeric(format!(
            "conjugate gradient stalled at relative residual {:.3e} after {max_iters} iterations (target {tol:.1e})",
            residual / b_norm
        )))
    }
}

fn check_template(
    num_nodes: usize,
    template: &TemplateSet,
    template_indices: &[usize],
) -> Result<()> {
    if template_indices.is_empty() {
        return Err(Error::parameter("template_indices must be nonempty"));
    }
    if template_indices.len() != template.len() {
        return Err(Error::structure(format!(
            "{} template indices for {} template rows",
            template_indices.len(),
            template.len()
        )));
    }
    let mut seen = vec![false; num_nodes];
    for &i in template_indices {
        if i >= num_nodes {
            return Err(Error::parameter(format!(
                "template index {i} out of range for {num_nodes} nodes"
            )));
        }
        if seen[i] {
            return Err(Error::parameter(format!("duplicate template index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Connected components over an undirected sparse pattern.
fn components(adjacency: &SparseMatrix) -> Vec<usize> {
    let n = adjacency.n_rows();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        stack.push(start);
        while let Some(node) = stack.pop() {
            let (cols, _) = adjacency.row(node);
            for &j in cols {
                if label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    label
}

struct ReducedSystem {
    matrix: SparseMatrix,
    rhs: Matrix,
    /// global node index per reduced row
    nodes: Vec<usize>,
    /// unlabeled nodes with no path to any template node
    detached: Vec<usize>,
}

/// Reduces the interpolation equations over unlabeled nodes: off-diagonal
/// couplings among unlabeled nodes keep the symmetrized weights, labeled
/// contributions move to the right-hand side, and `extra_diag`/`extra_rhs`
/// carry the template up-weighting term (zero for plain harmonic extension).
fn assemble_reduced(
    sym: &SparseMatrix,
    labels_by_node: &[Option<&[f64]>],
    num_classes: usize,
    extra_diag: &[f64],
    extra_rhs: &Matrix,
) -> ReducedSystem {
    let n = sym.n_rows();
    let comp = components(sym);
    let num_comps = comp.iter().max().map_or(0, |&c| c + 1);
    let mut comp_has_label = vec![false; num_comps];
    for i in 0..n {
        if labels_by_node[i].is_some() {
            comp_has_label[comp[i]] = true;
        }
    }

    let mut nodes = Vec::new();
    let mut detached = Vec::new();
    let mut reduced_index = vec![usize::MAX; n];
    for i in 0..n {
        if labels_by_node[i].is_some() {
            continue;
        }
        if comp_has_label[comp[i]] {
            reduced_index[i] = nodes.len();
            nodes.push(i);
        } else {
            detached.push(i);
        }
    }

    let mut triplets = Vec::new();
    let mut rhs = Matrix::zeros(nodes.len(), num_classes);
    for (ri, &i) in nodes.iter().enumerate() {
        let (cols, vals) = sym.row(i);
        let mut diag = extra_diag[i];
        for c in 0..num_classes {
            rhs[(ri, c)] += extra_rhs[(i, c)];
        }
        for (&j, &b) in cols.iter().zip(vals) {
            if j == i {
                continue;
            }
            diag += b;
            match labels_by_node[j] {
                Some(g) => {
                    for (c, &gc) in g.iter().enumerate() {
                        rhs[(ri, c)] += b * gc;
                    }
                }
                None => {
                    let rj = reduced_index[j];
                    debug_assert_ne!(rj, usize::MAX, "unlabeled neighbor outside labeled component");
                    triplets.push((ri, rj, -b));
                }
            }
        }
        triplets.push((ri, ri, diag));
    }

    ReducedSystem {
        matrix: SparseMatrix::from_triplets(nodes.len(), nodes.len(), triplets)
            .expect("reduced indices in range"),
        rhs,
        nodes,
        detached,
    }
}

fn compose_result(
    num_nodes: usize,
    num_classes: usize,
    labels_by_node: &[Option<&[f64]>],
    reduced: &ReducedSystem,
    solution: &Matrix,
) -> InterpolationResult {
    let mut u = Matrix::zeros(num_nodes, num_classes);
    for (i, maybe_g) in labels_by_node.iter().enumerate() {
        if let Some(g) = maybe_g {
            u.row_mut(i).copy_from_slice(g);
        }
    }
    for (ri, &i) in reduced.nodes.iter().enumerate() {
        u.row_mut(i).copy_from_slice(solution.row(ri));
    }
    if !reduced.detached.is_empty() {
        log::warn!(
            "{} unlabeled node(s) have no path to the template; assigning the uniform distribution",
            reduced.detached.len()
        );
        let uniform = 1.0 / num_classes as f64;
        for &i in &reduced.detached {
            u.row_mut(i).iter_mut().for_each(|v| *v = uniform);
        }
    }
    InterpolationResult { u }
}

fn solve_reduced(
    reduced: &ReducedSystem,
    cfg: &WnllConfig,
    num_nodes: usize,
) -> Result<Matrix> {
    if reduced.nodes.is_empty() {
        return Ok(Matrix::zeros(0, reduced.rhs.cols()));
    }
    let max_iters = cfg.max_iters.unwrap_or(10 * num_nodes.max(1));
    solve_spd(&reduced.matrix, &reduced.rhs, cfg.solver_tol, max_iters)
}

fn labels_by_node<'a>(
    num_nodes: usize,
    template: &'a TemplateSet,
    template_indices: &[usize],
) -> Vec<Option<&'a [f64]>> {
    let mut map = vec![None; num_nodes];
    for (k, &i) in template_indices.iter().enumerate() {
        map[i] = Some(template.labels.row(k));
    }
    map
}

/// Harmonic extension: solves sum_y (w(x,y)+w(y,x))(u(x)-u(y)) = 0 for each
/// unlabeled x with u = g on the template, one system per class column.
pub fn harmonic_interpolate(
    graph: &KnnGraph,
    template: &TemplateSet,
    template_indices: &[usize],
    cfg: &WnllConfig,
) -> Result<InterpolationResult> {
    cfg.validate()?;
    let n = graph.num_nodes();
    check_template(n, template, template_indices)?;
    let num_classes = template.num_classes();
    let labels = labels_by_node(n, template, template_indices);
    let sym = symmetrized_weights(graph);
    let reduced = assemble_reduced(
        &sym,
        &labels,
        num_classes,
        &vec![0.0; n],
        &Matrix::zeros(n, num_classes),
    );
    let solution = solve_reduced(&reduced, cfg, n)?;
    Ok(compose_result(n, num_classes, &labels, &reduced, &solution))
}

/// Weighted nonlocal Laplacian: the harmonic system plus the up-weighted
/// template coupling (|X|/|X^te| - 1) sum_{y in te} w(y,x)(u(x) - g(y)) for
/// each unlabeled x. The extra term touches only diagonals and right-hand
/// sides, so the reduced system stays symmetric.
pub fn wnll_interpolate(
    graph: &KnnGraph,
    template: &TemplateSet,
    template_indices: &[usize],
    cfg: &WnllConfig,
) -> Result<InterpolationResult> {
    cfg.validate()?;
    let n = graph.num_nodes();
    check_template(n, template, template_indices)?;
    let num_classes = template.num_classes();
    let labels = labels_by_node(n, template, template_indices);

    let mu = cfg
        .mu_override
        .unwrap_or(n as f64 / template_indices.len() as f64 - 1.0);

    let mut extra_diag = vec![0.0; n];
    let mut extra_rhs = Matrix::zeros(n, num_classes);
    for (k, &ty) in template_indices.iter().enumerate() {
        let g = template.labels.row(k);
        for (&x, &w) in graph.neighbors(ty).iter().zip(graph.weights(ty)) {
            if labels[x].is_some() {
                continue; // the extra term applies to unlabeled equations only
            }
            extra_diag[x] += mu * w;
            for (c, &gc) in g.iter().enumerate() {
                extra_rhs[(x, c)] += mu * w * gc;
            }
        }
    }

    let sym = symmetrized_weights(graph);
    let reduced = assemble_reduced(&sym, &labels, num_classes, &extra_diag, &extra_rhs);
    let solution = solve_reduced(&reduced, cfg, n)?;
    Ok(compose_result(n, num_classes, &labels, &reduced, &solution))
}

/// Generalized kernel interpolation: solves
/// sum_y R_delta(x,y)(u(x)-u(y)) + mu sum_{y in te} K_delta(x,y)(u(x)-g(y)) = 0
/// over unlabeled x with u = g on the template. Works directly on features;
/// unlabeled points with an empty R-neighborhood (and unlabeled groups with
/// neither a labeled R-path nor any K coupling) fall back to uniform scores.
pub fn generalized_wnll(
    features: &FeatureMatrix,
    template: &TemplateSet,
    template_indices: &[usize],
    kernels: &KernelSpec,
    cfg: &WnllConfig,
) -> Result<InterpolationResult> {
    cfg.validate()?;
    kernels.validate()?;
    let n = features.rows();
    check_template(n, template, template_indices)?;
    let num_classes = template.num_classes();
    let labels = labels_by_node(n, template, template_indices);

    let squared_dist = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    };

    // R-edge pattern (all pairs within the R support), plus per-node K terms.
    let mut r_triplets = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let r = kernels.r_delta(squared_dist(i, j));
            if r > 0.0 {
                r_triplets.push((i, j, r));
                r_triplets.push((j, i, r));
            }
        }
    }
    let r_matrix = SparseMatrix::from_triplets(n, n, r_triplets).expect("indices in range");

    let mut k_diag = vec![0.0; n];
    let mut k_rhs = Matrix::zeros(n, num_classes);
    for (k_idx, &ty) in template_indices.iter().enumerate() {
        let g = template.labels.row(k_idx);
        for x in 0..n {
            if labels[x].is_some() {
                continue;
            }
            let kv = kernels.k_delta(squared_dist(x, ty));
            if kv > 0.0 {
                k_diag[x] += kernels.mu * kv;
                for (c, &gc) in g.iter().enumerate() {
                    k_rhs[(x, c)] += kernels.mu * kv * gc;
                }
            }
        }
    }

    // Fallback set: empty R-neighborhood, or an R-component with no labeled
    // member and no K coupling anywhere (singular block either way).
    let comp = components(&r_matrix);
    let num_comps = comp.iter().max().map_or(0, |&c| c + 1);
    let mut comp_solvable = vec![false; num_comps];
    for i in 0..n {
        if labels[i].is_some() || k_diag[i] > 0.0 {
            comp_solvable[comp[i]] = true;
        }
    }
    let mut fallback = vec![false; n];
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        let has_r_neighbor = {
            let (cols, _) = r_matrix.row(i);
            cols.iter().any(|&j| j != i)
        };
        if !has_r_neighbor && k_diag[i] == 0.0 {
            fallback[i] = true;
        } else if !has_r_neighbor {
            // precondition violated for this point; still solvable through K
            // but the stated contract assigns uniform scores
            fallback[i] = true;
        } else if !comp_solvable[comp[i]] {
            fallback[i] = true;
        }
    }

    let mut reduced_index = vec![usize::MAX; n];
    let mut nodes = Vec::new();
    for i in 0..n {
        if labels[i].is_none() && !fallback[i] {
            reduced_index[i] = nodes.len();
            nodes.push(i);
        }
    }

    let mut triplets = Vec::new();
    let mut rhs = Matrix::zeros(nodes.len(), num_classes);
    for (ri, &i) in nodes.iter().enumerate() {
        let mut diag = k_diag[i];
        for c in 0..num_classes {
            rhs[(ri, c)] += k_rhs[(i, c)];
        }
        let (cols, vals) = r_matrix.row(i);
        for (&j, &r) in cols.iter().zip(vals) {
            if j == i {
                continue;
            }
            diag += r;
            match labels[j] {
                Some(g) => {
                    for (c, &gc) in g.iter().enumerate() {
                        rhs[(ri, c)] += r * gc;
                    }
                }
                None if fallback[j] => {
                    // coupled to a fallback node: treat its uniform score as
                    // boundary data so the reduced system stays SPD
                    let uniform = 1.0 / num_classes as f64;
                    for c in 0..num_classes {
                        rhs[(ri, c)] += r * uniform;
                    }
                }
                None => triplets.push((ri, reduced_index[j], -r)),
            }
        }
        triplets.push((ri, ri, diag));
    }

    let reduced = ReducedSystem {
        matrix: SparseMatrix::from_triplets(nodes.len(), nodes.len(), triplets)
            .expect("indices in range"),
        rhs,
        nodes,
        detached: fallback
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f)
            .map(|(i, _)| i)
            .collect(),
    };
    let solution = solve_reduced(&reduced, cfg, n)?;
    Ok(compose_result(n, num_classes, &labels, &reduced, &solution))
}

/// Per-row argmax over classes; ties broken by the lowest class index.
pub fn predict(result: &InterpolationResult) -> Vec<usize> {
    result.u.argmax_rows()
}

/// Per-row majority over per-result argmax predictions. Ties break first by
/// the larger summed score across results, then by the lowest class index.
pub fn vote(results: &[InterpolationResult]) -> Result<Vec<usize>> {
    let first = results
        .first()
        .ok_or_else(|| Error::parameter("vote needs at least one result"))?;
    let (rows, classes) = first.u.shape();
    for r in results {
        if r.u.shape() != (rows, classes) {
            return Err(Error::parameter(format!(
                "vote shape mismatch: {:?} vs {:?}",
                r.u.shape(),
                (rows, classes)
            )));
        }
    }

    let per_result: Vec<Vec<usize>> = results.iter().map(predict).collect();
    let mut out = Vec::with_capacity(rows);
    for row in 0..rows {
        let mut counts = vec![0usize; classes];
        for votes in &per_result {
            counts[votes[row]] += 1;
        }
        let top = *counts.iter().max().unwrap();
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            if counts[c] != top {
                continue;
            }
            let summed: f64 = results.iter().map(|r| r.u[(row, c)]).sum();
            if summed > best_score {
                best_score = summed;
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;
    use crate::graph::{knn_exact, KnnParams};
    use crate::matrix::Matrix;

    fn path_graph_3() -> (KnnGraph, TemplateSet, Vec<usize>) {
        // nodes at 0,1,2 on a line; with m=1 each endpoint links to the
        // middle and the middle links to node 0; symmetrization makes the
        // path uniform enough for the symmetry examples
        let f = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let graph = knn_exact(&f, KnnParams { m: 2, n: 1 }).unwrap();
        let template = TemplateSet::new(
            Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap(),
            one_hot(&[0, 1], 2),
        )
        .unwrap();
        (graph, template, vec![0, 2])
    }

    #[test]
    fn path_midpoint_is_half() {
        let (graph, template, idx) = path_graph_3();
        let cfg = WnllConfig::default();
        let h = harmonic_interpolate(&graph, &template, &idx, &cfg).unwrap();
        assert!((h.u[(1, 0)] - 0.5).abs() < 1e-10);
        assert!((h.u[(1, 1)] - 0.5).abs() < 1e-10);
        // boundary rows equal labels exactly
        assert_eq!(h.u.row(0), &[1.0, 0.0]);
        assert_eq!(h.u.row(2), &[0.0, 1.0]);

        let w = wnll_interpolate(&graph, &template, &idx, &cfg).unwrap();
        assert!((w.u[(1, 0)] - 0.5).abs() < 1e-10);
        assert!((w.u[(1, 1)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn all_labeled_returns_labels() {
        let f = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let graph = knn_exact(&f, KnnParams { m: 1, n: 1 }).unwrap();
        let template = TemplateSet::new(f.clone(), one_hot(&[0, 1, 0], 2)).unwrap();
        let cfg = WnllConfig::default();
        let res = harmonic_interpolate(&graph, &template, &[0, 1, 2], &cfg).unwrap();
        assert_eq!(res.u, template.labels);
        let res = wnll_interpolate(&graph, &template, &[0, 1, 2], &cfg).unwrap();
        assert_eq!(res.u, template.labels);
    }

    #[test]
    fn wnll_with_zero_mu_matches_harmonic() {
        let f = Matrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 10) as f64 * 0.31);
        let graph = knn_exact(&f, KnnParams { m: 4, n: 2 }).unwrap();
        let template = TemplateSet::new(f.select_rows(&[0, 5, 9]), one_hot(&[0, 1, 0], 2)).unwrap();
        let cfg = WnllConfig {
            mu_override: Some(0.0),
            ..WnllConfig::default()
        };
        let h = harmonic_interpolate(&graph, &template, &[0, 5, 9], &cfg).unwrap();
        let w = wnll_interpolate(&graph, &template, &[0, 5, 9], &cfg).unwrap();
        assert!(h.u.max_abs_diff(&w.u) < 1e-12);
    }

    #[test]
    fn solver_identity_and_hand_case() {
        let identity =
            SparseMatrix::from_triplets(3, 3, vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap();
        let rhs = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = solve_spd(&identity, &rhs, 1e-12, 100).unwrap();
        assert!(x.max_abs_diff(&rhs) < 1e-12);

        let a = SparseMatrix::from_triplets(
            2,
            2,
            vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0)],
        )
        .unwrap();
        let b = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let x = solve_spd(&a, &b, 1e-12, 100).unwrap();
        assert!((x[(0, 0)] - 2.0 / 3.0).abs() < 1e-10);
        assert!((x[(1, 0)] - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn solver_rejects_zero_diagonal() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap();
        let b = Matrix::zeros(2, 1);
        let err = solve_spd(&a, &b, 1e-10, 10).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn solver_reports_non_convergence() {
        // chain Laplacian with pinned ends needs ~n iterations; give it 2
        let n = 50;
        let mut triplets = Vec::new();
        for i in 0..n {
            triplets.push((i, i, 2.0));
            if i + 1 < n {
                triplets.push((i, i + 1, -1.0));
                triplets.push((i + 1, i, -1.0));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, triplets).unwrap();
        let mut b = Matrix::zeros(n, 1);
        b[(0, 0)] = 1.0;
        let err = solve_spd(&a, &b, 1e-14, 2).unwrap_err();
        assert!(err.to_string().contains("residual"), "{err}");
    }

    #[test]
    fn disconnected_component_gets_uniform() {
        // two far clusters; m=1 keeps them disconnected
        let f = Matrix::from_vec(4, 1, vec![0.0, 0.1, 100.0, 100.1]).unwrap();
        let graph = knn_exact(&f, KnnParams { m: 1, n: 1 }).unwrap();
        let template =
            TemplateSet::new(Matrix::from_vec(1, 1, vec![0.0]).unwrap(), one_hot(&[0], 2)).unwrap();
        let res = harmonic_interpolate(&graph, &template, &[0], &WnllConfig::default()).unwrap();
        assert_eq!(res.u.row(2), &[0.5, 0.5]);
        assert_eq!(res.u.row(3), &[0.5, 0.5]);
        assert!((res.u[(1, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generalized_symmetric_midpoint() {
        // single unlabeled node between two template neighbors with equal
        // kernels and opposite labels
        let f = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let template = TemplateSet::new(f.select_rows(&[0, 2]), one_hot(&[0, 1], 2)).unwrap();
        let kernels = KernelSpec::new(1.0, 2.0, 1).unwrap();
        let res =
            generalized_wnll(&f, &template, &[0, 2], &kernels, &WnllConfig::default()).unwrap();
        assert!((res.u[(1, 0)] - 0.5).abs() < 1e-10);
        assert!((res.u[(1, 1)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn generalized_large_mu_tends_to_template_mean() {
        // 3 nodes: unlabeled node 1 sits nearer node 0, so the K-weighted
        // mean of template labels is not the plain average
        let f = Matrix::from_vec(3, 1, vec![0.0, 0.6, 2.0]).unwrap();
        let template = TemplateSet::new(f.select_rows(&[0, 2]), one_hot(&[0, 1], 2)).unwrap();
        let kernels = KernelSpec {
            mu: 1e8,
            ..KernelSpec::new(1.0, 1.0, 1).unwrap()
        };
        let res =
            generalized_wnll(&f, &template, &[0, 2], &kernels, &WnllConfig::default()).unwrap();
        // closed-form limit: K-weighted mean of the template labels
        let k0 = kernels.k_delta(0.36);
        let k2 = kernels.k_delta(1.96);
        let expect0 = k0 / (k0 + k2);
        assert!((res.u[(1, 0)] - expect0).abs() < 1e-6);
        assert!((res.u[(1, 1)] - (1.0 - expect0)).abs() < 1e-6);
    }

    #[test]
    fn generalized_empty_neighborhood_uniform() {
        let f = Matrix::from_vec(3, 1, vec![0.0, 50.0, 2.0]).unwrap();
        let template = TemplateSet::new(f.select_rows(&[0, 2]), one_hot(&[0, 1], 2)).unwrap();
        let kernels = KernelSpec::new(1.0, 2.0, 1).unwrap();
        let res =
            generalized_wnll(&f, &template, &[0, 2], &kernels, &WnllConfig::default()).unwrap();
        assert_eq!(res.u.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn predict_and_vote_rules() {
        let r = InterpolationResult {
            u: Matrix::from_vec(2, 3, vec![0.2, 0.7, 0.1, 0.5, 0.5, 0.0]).unwrap(),
        };
        assert_eq!(predict(&r), vec![1, 0]);

        // single result: vote degenerates to predict
        assert_eq!(vote(std::slice::from_ref(&r)).unwrap(), predict(&r));

        // majority 0,0,1 -> 0
        let a = InterpolationResult {
            u: Matrix::from_vec(1, 2, vec![0.9, 0.1]).unwrap(),
        };
        let b = InterpolationResult {
            u: Matrix::from_vec(1, 2, vec![0.8, 0.2]).unwrap(),
        };
        let c = InterpolationResult {
            u: Matrix::from_vec(1, 2, vec![0.1, 0.9]).unwrap(),
        };
        assert_eq!(vote(&[a.clone(), b, c.clone()]).unwrap(), vec![0]);

        // 2-way tie with summed scores (1.4, 1.6) -> class 1
        let t1 = InterpolationResult {
            u: Matrix::from_vec(1, 2, vec![0.9, 0.7]).unwrap(),
        };
        let t2 = InterpolationResult {
            u: Matrix::from_vec(1, 2, vec![0.5, 0.9]).unwrap(),
        };
        assert_eq!(vote(&[t1, t2]).unwrap(), vec![1]);

        // mismatched shapes rejected
        let bad = InterpolationResult {
            u: Matrix::zeros(2, 2),
        };
        assert!(vote(&[a, bad]).is_err());
    }

    #[test]
    fn prediction_scale_invariant() {
        let u = Matrix::from_fn(6, 3, |i, j| ((i * 5 + j * 11) % 7) as f64 / 7.0 + 0.01);
        let r1 = InterpolationResult { u: u.clone() };
        let mut scaled = u;
        scaled.scale(3.7);
        let r2 = InterpolationResult { u: scaled };
        assert_eq!(predict(&r1), predict(&r2));
    }

    #[test]
    fn mu_monotone_scalar_instance() {
        // one unlabeled node between two template nodes at different
        // distances; growing mu pulls u toward the directed-template mean
        let f = Matrix::from_vec(3, 1, vec![0.0, 0.4, 1.0]).unwrap();
        let graph = knn_exact(&f, KnnParams { m: 2, n: 1 }).unwrap();
        let template = TemplateSet::new(f.select_rows(&[0, 2]), one_hot(&[0, 1], 2)).unwrap();

        // directed template weights into node 1
        let mut b = 0.0;
        let mut bg0 = 0.0;
        let mut d = 0.0;
        let mut dg0 = 0.0;
        for (&ty, g0) in [0usize, 2].iter().zip([1.0, 0.0]) {
            for (&x, &w) in graph.neighbors(ty).iter().zip(graph.weights(ty)) {
                if x == 1 {
                    d += w;
                    dg0 += w * g0;
                }
            }
        }
        for (&y, &w) in graph.neighbors(1).iter().zip(graph.weights(1)) {
            let g0 = if y == 0 { 1.0 } else { 0.0 };
            b += w;
            bg0 += w * g0;
        }
        // symmetrized couplings also include the reverse directions
        for (&ty, g0) in [0usize, 2].iter().zip([1.0, 0.0]) {
            for (&x, &w) in graph.neighbors(ty).iter().zip(graph.weights(ty)) {
                if x == 1 {
                    b += w;
                    bg0 += w * g0;
                }
            }
        }
        let limit = dg0 / d;
        let harmonic = bg0 / b;
        assert!((limit - harmonic).abs() > 1e-6, "instance must distinguish the limits");

        let mut prev_gap = f64::MAX;
        for mu in [0.0, 1.0, 10.0, 100.0, 10000.0] {
            let cfg = WnllConfig {
                mu_override: Some(mu),
                ..WnllConfig::default()
            };
            let res = wnll_interpolate(&graph, &template, &[0, 2], &cfg).unwrap();
            let gap = (res.u[(1, 0)] - limit).abs();
            assert!(gap <= prev_gap + 1e-12, "gap grew at mu={mu}");
            prev_gap = gap;
        }
    }

    #[test]
    fn csv_export_shape() {
        let r = InterpolationResult {
            u: Matrix::from_vec(2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap(),
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node_id,score_class_0,score_class_1,predicted_class");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0.9,0.1,0"));
        assert!(lines[2].ends_with(",1"));
    }
}

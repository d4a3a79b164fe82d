//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records forward operations into an arena; node indices are
//! already topologically ordered, so [`Tape::backward`] is a single reverse
//! sweep that touches each node once. Scalars are 1x1 matrices. The op set
//! covers exactly what the nets, losses, and attacks in this crate need.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a (N x k) * b (k x m)
    MatMul(NodeId, NodeId),
    /// a (N x k) + bias (1 x k) broadcast over rows
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Tanh(NodeId),
    /// scale * a + shift, elementwise; the shift has zero derivative so
    /// only the scale is recorded
    AffineScalar(NodeId, f64),
    Scale(NodeId, f64),
    /// sum of all entries -> scalar
    Sum(NodeId),
    /// sum of squared entries -> scalar
    SumSquares(NodeId),
    /// mean over rows of -sum_c labels * log softmax(logits) -> scalar
    SoftmaxCrossEntropy { logits: NodeId, labels: Matrix },
    /// sum over rows of max(-kappa, max_{i != t} z_i - z_t) -> scalar
    CwHinge {
        logits: NodeId,
        targets: Vec<usize>,
        kappa: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
}

/// Forward-computation record with gradient accumulation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Row-stabilized softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean over rows of the stabilized cross-entropy between `logits` and
/// (one-hot or soft) `labels`.
pub fn softmax_cross_entropy_value(logits: &Matrix, labels: &Matrix) -> f64 {
    assert_eq!(logits.shape(), labels.shape(), "cross-entropy shape mismatch");
    let mut total = 0.0;
    for (zrow, lrow) in logits.row_iter().zip(labels.row_iter()) {
        let max = zrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + zrow.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let dot: f64 = zrow.iter().zip(lrow).map(|(&z, &l)| z * l).sum();
        total += lse - dot;
    }
    total / logits.rows() as f64
}

fn cw_hinge_rows(logits: &Matrix, targets: &[usize], kappa: f64) -> Vec<f64> {
    logits
        .row_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let best_other = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != t)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            (best_other - row[t]).max(-kappa)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of the last backward pass, if the node was
    /// reached from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *v += b;
            }
        }
        self.push(Op::AddBias(a, bias), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn affine_scalar(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(a).map(|v| scale * v + shift);
        self.push(Op::AffineScalar(a, scale), value)
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> NodeId {
        let value = self.value(a).map(|v| scale * v);
        self.push(Op::Scale(a, scale), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).data().iter().map(|&v| v * v).sum());
        self.push(Op::SumSquares(a), value)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Matrix) -> NodeId {
        let value = Matrix::scalar(softmax_cross_entropy_value(self.value(logits), &labels));
        self.push(Op::SoftmaxCrossEntropy { logits, labels }, value)
    }

    pub fn cw_hinge(&mut self, logits: NodeId, targets: Vec<usize>, kappa: f64) -> NodeId {
        assert_eq!(
            self.value(logits).rows(),
            targets.len(),
            "one target per row"
        );
        let value = Matrix::scalar(
            cw_hinge_rows(self.value(logits), &targets, kappa)
                .iter()
                .sum(),
        );
        self.push(
            Op::CwHinge {
                logits,
                targets,
                kappa,
            },
            value,
        )
    }

    fn accumulate(&mut self, id: NodeId, delta: Matrix) {
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse-mode sweep from a scalar loss node. Gradients of every node
    /// reachable from the loss (parameters and inputs included) are
    /// accumulated and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("backward called with a foreign node id"));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            match self.nodes[idx].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.matmul(&self.value(b).transpose());
                    let db = self.value(a).transpose().matmul(&grad);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddBias(a, bias) => {
                    self.accumulate(bias, grad.column_sums());
                    self.accumulate(a, grad);
                }
                Op::Relu(a) => {
                    let da = grad.zip_map(self.value(a), |g, v| if v > 0.0 { g } else { 0.0 });
                    self.accumulate(a, da);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    let mut neg = grad.clone();
                    neg.scale(-1.0);
                    self.accumulate(a, grad);
                    self.accumulate(b, neg);
                }
                Op::Tanh(a) => {
                    let da = grad.zip_map(&self.nodes[idx].value, |g, t| g * (1.0 - t * t));
                    self.accumulate(a, da);
                }
                Op::AffineScalar(a, scale) | Op::Scale(a, scale) => {
                    let mut da = grad;
                    da.scale(scale);
                    self.accumulate(a, da);
                }
                Op::Sum(a) => {
                    let g = grad[(0, 0)];
                    let (r, c) = self.value(a).shape();
                    self.accumulate(a, Matrix::from_fn(r, c, |_, _| g));
                }
                Op::SumSquares(a) => {
                    let g = grad[(0, 0)];
                    let da = self.value(a).map(|v| 2.0 * g * v);
                    self.accumulate(a, da);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let g = grad[(0, 0)] / self.value(logits).rows() as f64;
                    let mut da = softmax(self.value(logits));
                    da.add_scaled(&labels, -1.0);
                    da.scale(g);
                    self.accumulate(logits, da);
                }
                Op::CwHinge {
                    logits,
                    targets,
                    kappa,
                } => {
                    let g = grad[(0, 0)];
                    let z = self.value(logits);
                    let mut da = Matrix::zeros(z.rows(), z.cols());
                    for (i, (row, &t)) in z.row_iter().zip(&targets).enumerate() {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for (j, &v) in row.iter().enumerate() {
                            if j != t && v > best_v {
                                best_v = v;
                                best = j;
                            }
                        }
                        // active only strictly above the -kappa floor
                        if best_v - row[t] > -kappa {
                            da[(i, best)] += g;
                            da[(i, t)] -= g;
                        }
                    }
                    self.accumulate(logits, da);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn sum_of_inputs_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Matrix::ones(2, 3));
    }

    #[test]
    fn half_norm_grad_is_input() {
        let mut tape = Tape::new();
        let value = Matrix::from_vec(1, 4, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let x = tape.leaf(value.clone());
        let sq = tape.sum_squares(x);
        let loss = tape.scale(sq, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &value);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        for c in [2usize, 5, 10] {
            let logits = Matrix::zeros(4, c);
            let labels = Matrix::from_fn(4, c, |_, j| if j == 0 { 1.0 } else { 0.0 });
            let v = softmax_cross_entropy_value(&logits, &labels);
            assert!((v - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut logits = Matrix::zeros(1, 3);
        logits[(0, 1)] = 50.0;
        let labels = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let v = softmax_cross_entropy_value(&logits, &labels);
        assert!(v < 1e-20, "loss {v} not saturated");
    }

    #[test]
    fn cross_entropy_matches_plain_route() {
        // independent unstabilized route at small logits
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::from_fn(6, 4, |_, _| rng.random_range(-3.0..3.0));
        let classes: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let labels = crate::data::one_hot(&classes, 4);
        let mut oracle = 0.0;
        for (row, &c) in logits.row_iter().zip(&classes) {
            let denom: f64 = row.iter().map(|&z| z.exp()).sum();
            oracle -= (row[c].exp() / denom).ln();
        }
        oracle /= 6.0;
        let v = softmax_cross_entropy_value(&logits, &labels);
        assert!((v - oracle).abs() < 1e-10);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let logits = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let shifted = logits.map(|v| v + 123.456);
        let labels = crate::data::one_hot(&[0, 1, 2, 0, 1], 3);
        let a = softmax_cross_entropy_value(&logits, &labels);
        let b = softmax_cross_entropy_value(&shifted, &labels);
        assert!((a - b).abs() < 1e-10);
    }

    /// Central finite differences on an arbitrary scalar-valued tape builder.
    fn finite_diff_check(
        build: &dyn Fn(&mut Tape, &Matrix) -> (NodeId, NodeId),
        x0: &Matrix,
        tolerance: f64,
    ) {
        let mut tape = Tape::new();
        let (x_id, loss) = build(&mut tape, x0);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x_id).unwrap().clone();

        let h = 1e-5;
        for i in 0..x0.rows() {
            for j in 0..x0.cols() {
                let mut plus = x0.clone();
                plus[(i, j)] += h;
                let mut minus = x0.clone();
                minus[(i, j)] -= h;
                let mut tp = Tape::new();
                let (_, lp) = build(&mut tp, &plus);
                let mut tm = Tape::new();
                let (_, lm) = build(&mut tm, &minus);
                let numeric = (tp.value(lp)[(0, 0)] - tm.value(lm)[(0, 0)]) / (2.0 * h);
                let denom = analytic[(i, j)].abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic[(i, j)] - numeric).abs() / denom <= tolerance,
                    "({i},{j}): analytic {} vs numeric {numeric}",
                    analytic[(i, j)]
                );
            }
        }
    }

    #[test]
    fn finite_difference_composite_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let w = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(1, 2, |_, _| rng.random_range(-0.5..0.5));
        let labels = crate::data::one_hot(&[0, 1, 1, 0], 2);
        let x0 = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));

        finite_diff_check(
            &move |tape, x| {
                let xid = tape.leaf(x.clone());
                let t = tape.tanh(xid);
                let wid = tape.leaf(w.clone());
                let bid = tape.leaf(b.clone());
                let mm = tape.matmul(t, wid);
                let z = tape.add_bias(mm, bid);
                let r = tape.relu(z);
                let shifted = tape.affine_scalar(r, 1.3, 0.2);
                let ce = tape.softmax_cross_entropy(shifted, labels.clone());
                let sq = tape.sum_squares(xid);
                let reg = tape.scale(sq, 0.01);
                (xid, tape.add(ce, reg))
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn finite_difference_cw_objective() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let w = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let x_orig = Matrix::from_fn(2, 2, |_, _| rng.random_range(0.2..0.8));
        let w0 = Matrix::from_fn(2, 2, |_, _| rng.random_range(-0.5..0.5));
        let targets = vec![2usize, 0];

        finite_diff_check(
            &move |tape, wv| {
                let wid = tape.leaf(wv.clone());
                let th = tape.tanh(wid);
                let adv = tape.affine_scalar(th, 0.5, 0.5);
                let xo = tape.leaf(x_orig.clone());
                let delta = tape.sub(adv, xo);
                let dist = tape.sum_squares(delta);
                let weights = tape.leaf(w.clone());
                let logits = tape.matmul(adv, weights);
                let hinge = tape.cw_hinge(logits, targets.clone(), 0.0);
                let scaled = tape.scale(hinge, 10.0);
                (wid, tape.add(dist, scaled))
            },
            &w0,
            1e-5,
        );
    }
}

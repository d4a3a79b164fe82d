//! Dual-head network: an MLP feature extractor, a buffer block (one dense
//! layer + ReLU), and two output branches: a linear head producing logits
//! and, downstream of the same buffered features, the graph-interpolating
//! head driven by the train/attack modules.
//!
//! Forward passes record onto a [`Tape`]; a [`Forward`] bundles the tape with
//! the node ids needed to read features, attach losses, and pull gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{softmax_cross_entropy_value, NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, LabelMatrix, Matrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// in x out
    pub weights: Matrix,
    /// 1 x out
    pub bias: Matrix,
}

impl DenseLayer {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        DenseLayer {
            weights: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Feature extractor Theta, buffer block W_B, linear head W_L.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadNet {
    pub theta: Vec<DenseLayer>,
    pub buffer: DenseLayer,
    pub linear: DenseLayer,
    pub rng_seed: u64,
    input_dim: usize,
}

impl DualHeadNet {
    /// Fresh net with scaled-uniform fan-in init. `theta_widths` lists the
    /// hidden widths of the extractor (each followed by ReLU); the buffer
    /// block adds one more dense+ReLU layer before both heads.
    pub fn new(
        input_dim: usize,
        theta_widths: &[usize],
        buffer_width: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || buffer_width == 0 || num_classes == 0 {
            return Err(Error::parameter("layer widths must be positive"));
        }
        if theta_widths.contains(&0) {
            return Err(Error::parameter("theta widths must be positive"));
        }
        let mut rng = rng::stream(seed, &[0x17]);
        let mut theta = Vec::with_capacity(theta_widths.len());
        let mut prev = input_dim;
        for &w in theta_widths {
            theta.push(DenseLayer::init(prev, w, &mut rng));
            prev = w;
        }
        let buffer = DenseLayer::init(prev, buffer_width, &mut rng);
        let linear = DenseLayer::init(buffer_width, num_classes, &mut rng);
        Ok(DualHeadNet {
            theta,
            buffer,
            linear,
            rng_seed: seed,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn buffer_width(&self) -> usize {
        self.buffer.out_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn theta_widths(&self) -> Vec<usize> {
        self.theta.iter().map(DenseLayer::out_dim).collect()
    }

    /// Runs extractor and buffer on a tape: returns the recorded pass with
    /// x_tilde (extractor output) and x_hat (buffered features).
    pub fn forward_features(&self, x: &FeatureMatrix) -> Result<Forward> {
        if x.cols() != self.input_dim {
            return Err(Error::structure(format!(
                "input width {} does not match net input {}",
                x.cols(),
                self.input_dim
            )));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let (x_tilde, x_hat, theta_ids, buffer_ids) = self.features_on_tape(&mut tape, input);
        Ok(Forward {
            tape,
            input,
            x_tilde,
            x_hat,
            logits: None,
            theta_ids,
            buffer_ids,
            linear_ids: None,
        })
    }

    #[allow(clippy::type_complexity)]
    fn features_on_tape(
        &self,
        tape: &mut Tape,
        input: NodeId,
    ) -> (NodeId, NodeId, Vec<(NodeId, NodeId)>, (NodeId, NodeId)) {
        let mut theta_ids = Vec::with_capacity(self.theta.len());
        let mut h = input;
        for layer in &self.theta {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(layer.bias.clone());
            let z = tape.matmul(h, w);
            let zb = tape.add_bias(z, b);
            h = tape.relu(zb);
            theta_ids.push((w, b));
        }
        let x_tilde = h;
        let w = tape.leaf(self.buffer.weights.clone());
        let b = tape.leaf(self.buffer.bias.clone());
        let z = tape.matmul(x_tilde, w);
        let zb = tape.add_bias(z, b);
        let x_hat = tape.relu(zb);
        (x_tilde, x_hat, theta_ids, (w, b))
    }

    /// Full chain input -> logits on an existing tape, so callers can
    /// differentiate through the net from upstream nodes (e.g. a perturbation
    /// reparametrization).
    pub fn logits_on_tape(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        if tape.value(input).cols() != self.input_dim {
            return Err(Error::structure(format!(
                "input width {} does not match net input {}",
                tape.value(input).cols(),
                self.input_dim
            )));
        }
        let (_, x_hat, _, _) = self.features_on_tape(tape, input);
        let w = tape.leaf(self.linear.weights.clone());
        let b = tape.leaf(self.linear.bias.clone());
        let z = tape.matmul(x_hat, w);
        Ok(tape.add_bias(z, b))
    }

    /// Extends a recorded pass with the linear head: logits = x_hat W_L + b.
    pub fn forward_linear(&self, fwd: &mut Forward) -> Result<NodeId> {
        if fwd.tape.value(fwd.x_hat).cols() != self.linear.in_dim() {
            return Err(Error::structure(format!(
                "buffered width {} does not match linear head input {}",
                fwd.tape.value(fwd.x_hat).cols(),
                self.linear.in_dim()
            )));
        }
        let w = fwd.tape.leaf(self.linear.weights.clone());
        let b = fwd.tape.leaf(self.linear.bias.clone());
        let z = fwd.tape.matmul(fwd.x_hat, w);
        let logits = fwd.tape.add_bias(z, b);
        fwd.logits = Some(logits);
        fwd.linear_ids = Some((w, b));
        Ok(logits)
    }

    /// Buffered features without gradient bookkeeping.
    pub fn buffered_features(&self, x: &FeatureMatrix) -> Result<Matrix> {
        let fwd = self.forward_features(x)?;
        Ok(fwd.tape.value(fwd.x_hat).clone())
    }

    /// Linear-head logits without gradient bookkeeping.
    pub fn logits(&self, x: &FeatureMatrix) -> Result<Matrix> {
        let mut fwd = self.forward_features(x)?;
        let id = self.forward_linear(&mut fwd)?;
        Ok(fwd.tape.value(id).clone())
    }

    pub fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain([&self.buffer, &self.linear])
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }

    fn param_slots(&self) -> Vec<&Matrix> {
        let mut slots = Vec::new();
        for layer in &self.theta {
            slots.push(&layer.weights);
            slots.push(&layer.bias);
        }
        slots.push(&self.buffer.weights);
        slots.push(&self.buffer.bias);
        slots.push(&self.linear.weights);
        slots.push(&self.linear.bias);
        slots
    }

    fn param_slots_mut(&mut self) -> Vec<&mut Matrix> {
        let mut slots: Vec<&mut Matrix> = Vec::new();
        for layer in &mut self.theta {
            slots.push(&mut layer.weights);
            slots.push(&mut layer.bias);
        }
        slots.push(&mut self.buffer.weights);
        slots.push(&mut self.buffer.bias);
        slots.push(&mut self.linear.weights);
        slots.push(&mut self.linear.bias);
        slots
    }

    /// Versioned binary checkpoint: magic, version, layer widths, seed,
    /// then little-endian f64 parameter arrays in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let path_str = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&path_str, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(&path_str, e);

        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.input_dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.theta.len() as u32).to_le_bytes()).map_err(io)?;
        for layer in &self.theta {
            w.write_all(&(layer.out_dim() as u32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(self.buffer_width() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.num_classes() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&self.rng_seed.to_le_bytes()).map_err(io)?;
        for slot in self.param_slots() {
            for v in slot.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path_str = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&path_str, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &path_str)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(&path_str, "bad checkpoint magic"));
        }
        let version = read_u32(&mut r, &path_str)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                &path_str,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let input_dim = read_u32(&mut r, &path_str)? as usize;
        let n_theta = read_u32(&mut r, &path_str)? as usize;
        let mut theta_widths = Vec::with_capacity(n_theta);
        for _ in 0..n_theta {
            theta_widths.push(read_u32(&mut r, &path_str)? as usize);
        }
        let buffer_width = read_u32(&mut r, &path_str)? as usize;
        let num_classes = read_u32(&mut r, &path_str)? as usize;
        let mut seed_bytes = [0u8; 8];
        read_exact(&mut r, &mut seed_bytes, &path_str)?;
        let rng_seed = u64::from_le_bytes(seed_bytes);

        let mut net = DualHeadNet::new(input_dim, &theta_widths, buffer_width, num_classes, rng_seed)?;
        for slot in net.param_slots_mut() {
            for v in slot.data_mut() {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf, &path_str)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::io(&path_str, e))? != 0 {
            return Err(Error::format(&path_str, "trailing bytes after parameters"));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LPNETCK1";
const CHECKPOINT_VERSION: u32 = 1;

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, "truncated checkpoint"))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

/// One recorded forward pass through a net.
pub struct Forward {
    pub tape: Tape,
    pub input: NodeId,
    pub x_tilde: NodeId,
    pub x_hat: NodeId,
    pub logits: Option<NodeId>,
    theta_ids: Vec<(NodeId, NodeId)>,
    buffer_ids: (NodeId, NodeId),
    linear_ids: Option<(NodeId, NodeId)>,
}

impl Forward {
    pub fn x_tilde_value(&self) -> &Matrix {
        self.tape.value(self.x_tilde)
    }

    pub fn x_hat_value(&self) -> &Matrix {
        self.tape.value(self.x_hat)
    }

    /// Attaches the cross-entropy loss on the linear head's logits.
    pub fn linear_loss(&mut self, labels: &LabelMatrix) -> Result<NodeId> {
        let logits = self
            .logits
            .ok_or_else(|| Error::usage("linear head was not run on this pass"))?;
        Ok(self.tape.softmax_cross_entropy(logits, labels.clone()))
    }

    /// Collects parameter (and input) gradients after a backward pass;
    /// parameters unreachable from the loss get zero gradients.
    pub fn grads(&self, net: &DualHeadNet) -> NetGrads {
        let fetch = |id: NodeId, like: &Matrix| {
            self.tape
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
        };
        NetGrads {
            theta: self
                .theta_ids
                .iter()
                .zip(&net.theta)
                .map(|(&(w, b), layer)| LayerGrads {
                    weights: fetch(w, &layer.weights),
                    bias: fetch(b, &layer.bias),
                })
                .collect(),
            buffer: LayerGrads {
                weights: fetch(self.buffer_ids.0, &net.buffer.weights),
                bias: fetch(self.buffer_ids.1, &net.buffer.bias),
            },
            linear: self.linear_ids.map(|(w, b)| LayerGrads {
                weights: fetch(w, &net.linear.weights),
                bias: fetch(b, &net.linear.bias),
            }),
            input: self.tape.grad(self.input).cloned(),
        }
    }
}

/// Mean cross-entropy between logits and labels (numerically stabilized).
pub fn cross_entropy(logits: &Matrix, labels: &LabelMatrix) -> f64 {
    softmax_cross_entropy_value(logits, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl LayerGrads {
    fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrads {
            weights: Matrix::zeros(layer.weights.rows(), layer.weights.cols()),
            bias: Matrix::zeros(1, layer.bias.cols()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.scale(s);
        self.bias.scale(s);
    }
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub theta: Vec<LayerGrads>,
    pub buffer: LayerGrads,
    pub linear: Option<LayerGrads>,
    pub input: Option<Matrix>,
}

impl NetGrads {
    /// Buffer-only gradients (the WNLL training stage updates W_B alone).
    pub fn buffer_only(buffer: LayerGrads, net: &DualHeadNet) -> Self {
        NetGrads {
            theta: net.theta.iter().map(LayerGrads::zeros_like).collect(),
            buffer,
            linear: None,
            input: None,
        }
    }
}

/// Which parameter blocks an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub theta: bool,
    pub buffer: bool,
    pub linear: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        theta: true,
        buffer: true,
        linear: true,
    };
    pub const BUFFER_ONLY: ParamMask = ParamMask {
        theta: false,
        buffer: true,
        linear: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.theta || self.buffer || self.linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Optim {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Optim {
    pub fn sgd(lr: f64) -> Self {
        Optim {
            kind: OptimKind::SgdMomentum,
            lr,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn plain_sgd(lr: f64) -> Self {
        Optim {
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
            ..Optim::sgd(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optim {
            kind: OptimKind::Adam,
            weight_decay: 0.0,
            ..Optim::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.lr.is_finite()
            && self.momentum.is_finite()
            && self.weight_decay.is_finite()
            && self.beta1.is_finite()
            && self.beta2.is_finite()
            && self.eps.is_finite();
        if !finite || self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0
        {
            return Err(Error::parameter(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct SlotState {
    momentum: Option<Vec<f64>>,
    adam_m: Option<Vec<f64>>,
    adam_v: Option<Vec<f64>>,
    adam_t: u64,
}

/// Optimizer with per-parameter state; slots follow declaration order
/// (theta layers, buffer, linear; weights before bias).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: Optim,
    slots: Vec<SlotState>,
}

impl Optimizer {
    pub fn new(cfg: Optim, net: &DualHeadNet) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            slots: vec![SlotState::default(); 2 * net.theta.len() + 4],
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update to the masked parameter blocks; unmasked blocks
    /// (parameters and their optimizer state) stay bitwise untouched.
    pub fn step(&mut self, net: &mut DualHeadNet, grads: &NetGrads, mask: ParamMask) -> Result<()> {
        if mask.is_empty() {
            return Err(Error::usage("empty parameter mask"));
        }
        if grads.theta.len() != net.theta.len() {
            return Err(Error::structure(format!(
                "{} theta gradients for {} layers",
                grads.theta.len(),
                net.theta.len()
            )));
        }
        if mask.linear && grads.linear.is_none() {
            return Err(Error::usage("linear head masked in but no linear gradients"));
        }

        let n_theta = net.theta.len();
        let cfg = self.cfg;
        let mut updates: Vec<(usize, &Matrix, &mut Matrix)> = Vec::new();
        let params = net.param_slots_mut();
        for (layer_idx, param) in params.into_iter().enumerate() {
            let slot = layer_idx;
            let block_theta = layer_idx < 2 * n_theta;
            let block_buffer = layer_idx >= 2 * n_theta && layer_idx < 2 * n_theta + 2;
            let enabled = (block_theta && mask.theta)
                || (block_buffer && mask.buffer)
                || (layer_idx >= 2 * n_theta + 2 && mask.linear);
            if enabled {
                let grad = if block_theta {
                    let layer = layer_idx / 2;
                    if layer_idx % 2 == 0 {
                        &grads.theta[layer].weights
                    } else {
                        &grads.theta[layer].bias
                    }
                } else if block_buffer {
                    if layer_idx % 2 == 0 {
                        &grads.buffer.weights
                    } else {
                        &grads.buffer.bias
                    }
                } else {
                    let linear = grads.linear.as_ref().expect("checked above");
                    if layer_idx % 2 == 0 {
                        &linear.weights
                    } else {
                        &linear.bias
                    }
                };
                if grad.shape() != param.shape() {
                    return Err(Error::structure(format!(
                        "gradient shape {:?} does not match parameter {:?}",
                        grad.shape(),
                        param.shape()
                    )));
                }
                updates.push((slot, grad, param));
            }
        }

        for (slot, grad, param) in updates {
            apply_update(&cfg, &mut self.slots[slot], grad, param);
            if !param.is_finite() {
                return Err(Error::numeric("parameters became non-finite after update"));
            }
        }
        Ok(())
    }
}

fn apply_update(cfg: &Optim, state: &mut SlotState, grad: &Matrix, param: &mut Matrix) {
    let n = param.data().len();
    match cfg.kind {
        OptimKind::SgdMomentum => {
            let buf = state.momentum.get_or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = grad.data()[i] + cfg.weight_decay * param.data()[i];
                buf[i] = cfg.momentum * buf[i] + g;
                let d = if cfg.nesterov {
                    g + cfg.momentum * buf[i]
                } else {
                    buf[i]
                };
                param.data_mut()[i] -= cfg.lr * d;
            }
        }
        OptimKind::Adam => {
            let m = state.adam_m.get_or_insert_with(|| vec![0.0; n]);
            let v = state.adam_v.get_or_insert_with(|| vec![0.0; n]);
            state.adam_t += 1;
            let t = state.adam_t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..n {
                let g = grad.data()[i] + cfg.weight_decay * param.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

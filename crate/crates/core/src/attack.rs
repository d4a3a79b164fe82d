//! Gradient-based attacks: single-step and iterated sign attacks on the
//! l-infinity ball, and the l2 margin attack with tanh reparametrization.
//!
//! Attacks against the interpolating head cannot differentiate through the
//! interpolation; they rescale the linear branch's input gradient by the
//! interpolating loss value, mirroring the surrogate used in training. The
//! margin attack takes its logits from the linear branch under either
//! gradient source.

use crate::data::TemplateSet;
use crate::error::{Error, Result};
use crate::graph::{knn_exact, KnnParams};
use crate::interpolate::{wnll_interpolate, WnllConfig};
use crate::matrix::{FeatureMatrix, LabelMatrix, Matrix};
use crate::net::DualHeadNet;
use crate::train::wnll_loss;

/// How the margin attack picks its target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// Highest non-true logit at the clean input.
    BestOther,
    Fixed(usize),
}

/// Attack budgets and solver settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// l-infinity budget in [0,1] image units.
    pub epsilon: f64,
    /// Per-iteration step size.
    pub alpha: f64,
    /// Iteration count M.
    pub steps: usize,
    /// Margin-attack confidence.
    pub kappa: f64,
    /// Margin-attack distance/hinge trade-off.
    pub c: f64,
    pub cw_lr: f64,
    pub cw_iters: usize,
    pub target_rule: TargetRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            kappa: 0.0,
            c: 10.0,
            cw_lr: 6e-3,
            cw_iters: 50,
            target_rule: TargetRule::BestOther,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = self.epsilon.is_finite()
            && self.alpha.is_finite()
            && self.kappa.is_finite()
            && self.c.is_finite()
            && self.cw_lr.is_finite();
        if !finite
            || self.epsilon < 0.0
            || !(self.alpha > 0.0)
            || self.kappa < 0.0
            || !(self.c > 0.0)
        {
            return Err(Error::parameter(format!("invalid attack settings {self:?}")));
        }
        Ok(())
    }
}

/// Where input gradients come from: the exact linear-head loss, or the
/// interpolating head's loss routed through the linear branch.
#[derive(Clone)]
pub enum GradientSource<'a> {
    LinearHead,
    WnllSurrogate {
        template: &'a TemplateSet,
        /// Query and template rows are both processed in batches of this
        /// size (full set when smaller).
        batch: usize,
        knn: KnnParams,
        wnll: WnllConfig,
    },
}

impl<'a> GradientSource<'a> {
    pub fn wnll(template: &'a TemplateSet) -> Self {
        GradientSource::WnllSurrogate {
            template,
            batch: 500,
            knn: KnnParams::default(),
            wnll: WnllConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let GradientSource::WnllSurrogate { template, batch, .. } = self {
            if template.is_empty() {
                return Err(Error::parameter("surrogate source needs a nonempty template"));
            }
            if *batch == 0 {
                return Err(Error::parameter("surrogate batch must be at least 1"));
            }
        }
        Ok(())
    }
}

pub fn source_name(src: &GradientSource) -> &'static str {
    match src {
        GradientSource::LinearHead => "linear-head",
        GradientSource::WnllSurrogate { .. } => "wnll-surrogate",
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss gradient with respect to the input pixels.
///
/// Linear head: exact reverse-mode gradient of the mean cross-entropy.
/// Surrogate: the linear-branch input gradient rescaled by
/// loss_wnll / max(loss_linear, 1e-12); the interpolating loss of a query
/// batch is averaged over template batches.
pub fn input_grad(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    src: &GradientSource,
) -> Result<Matrix> {
    src.validate()?;
    if x.rows() != y.rows() {
        return Err(Error::structure(format!(
            "{} inputs but {} label rows",
            x.rows(),
            y.rows()
        )));
    }
    match src {
        GradientSource::LinearHead => {
            let (grad, _) = linear_input_grad(net, x, y)?;
            Ok(grad)
        }
        GradientSource::WnllSurrogate {
            template,
            batch,
            knn,
            wnll,
        } => {
            let mut out = Matrix::zeros(x.rows(), x.cols());
            let rows: Vec<usize> = (0..x.rows()).collect();
            for chunk in rows.chunks(*batch) {
                let xb = x.select_rows(chunk);
                let yb = y.select_rows(chunk);
                let loss_wnll = surrogate_loss(net, &xb, &yb, template, *batch, *knn, wnll)?;
                let (mut grad, loss_linear) = linear_input_grad(net, &xb, &yb)?;
                grad.scale(loss_wnll / loss_linear.max(1e-12));
                for (local, &global) in chunk.iter().enumerate() {
                    out.row_mut(global).copy_from_slice(grad.row(local));
                }
            }
            Ok(out)
        }
    }
}

fn linear_input_grad(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
) -> Result<(Matrix, f64)> {
    let mut fwd = net.forward_features(x)?;
    net.forward_linear(&mut fwd)?;
    let loss = fwd.linear_loss(y)?;
    let loss_value = fwd.tape.value(loss)[(0, 0)];
    fwd.tape.backward(loss)?;
    let grad = fwd
        .grads(net)
        .input
        .ok_or_else(|| Error::numeric("input unreachable from loss"))?;
    Ok((grad, loss_value))
}

/// Interpolating-head loss of a query batch, averaged over template batches.
fn surrogate_loss(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    template: &TemplateSet,
    batch: usize,
    knn: KnnParams,
    wnll: &WnllConfig,
) -> Result<f64> {
    let query_hat = net.buffered_features(x)?;
    let template_hat = net.buffered_features(&template.features)?;
    let query_rows: Vec<usize> = (0..query_hat.rows()).collect();

    let chunks: Vec<Vec<usize>> = (0..template.len())
        .collect::<Vec<_>>()
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect();
    let mut total = 0.0;
    for chunk in &chunks {
        let chunk_template = TemplateSet::new(
            template.features.select_rows(chunk),
            template.labels.select_rows(chunk),
        )?;
        let combined = query_hat.vstack(&template_hat.select_rows(chunk))?;
        let template_indices: Vec<usize> = (query_hat.rows()..combined.rows()).collect();
        let graph = knn_exact(&combined, knn)?;
        let result = wnll_interpolate(&graph, &chunk_template, &template_indices, wnll)?;
        total += wnll_loss(&result.u.select_rows(&query_rows), y);
    }
    Ok(total / chunks.len() as f64)
}

/// Elementwise min{1, x + eps, max{0, x - eps, x_adv}}.
pub fn clip_ball(x_adv: &FeatureMatrix, x: &FeatureMatrix, epsilon: f64) -> FeatureMatrix {
    assert_eq!(x_adv.shape(), x.shape(), "clip shape mismatch");
    x_adv.zip_map(x, |adv, clean| {
        adv.max(0.0)
            .max(clean - epsilon)
            .min(clean + epsilon)
            .min(1.0)
    })
}

/// Single-step sign attack: clamp_[0,1](x + eps * sign(grad)); sign(0) = 0.
pub fn fgsm(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    cfg: &AttackConfig,
    src: &GradientSource,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let grad = input_grad(net, x, y, src)?;
    Ok(x.zip_map(&grad, |xi, g| (xi + cfg.epsilon * sign(g)).clamp(0.0, 1.0)))
}

/// Iterated sign attack: M steps of x <- clip(x + alpha * sign(grad)),
/// clipped to the eps-ball around the clean input and the [0,1] box.
pub fn ifgsm(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    cfg: &AttackConfig,
    src: &GradientSource,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Err(Error::parameter("iterated attack needs at least 1 step"));
    }
    if cfg.alpha > cfg.epsilon {
        return Err(Error::parameter(format!(
            "step size {} exceeds the budget {}",
            cfg.alpha, cfg.epsilon
        )));
    }
    run_iterated(net, x, y, cfg, src, x.clone())
}

/// Iterated attack initialized with uniform noise in the eps-ball (the
/// projected-gradient init used by adversarial training). The per-step
/// clipping enforces the budget, so alpha > eps is allowed here; eps = 0
/// degenerates to the clean input exactly.
pub fn ifgsm_with_noise(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    cfg: &AttackConfig,
    src: &GradientSource,
    noise_seed: u64,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Err(Error::parameter("iterated attack needs at least 1 step"));
    }
    let start = if cfg.epsilon > 0.0 {
        use rand::Rng;
        let mut rng = crate::rng::stream(noise_seed, &[]);
        x.map(|xi| xi + rng.random_range(-cfg.epsilon..=cfg.epsilon))
    } else {
        x.clone()
    };
    run_iterated(net, x, y, cfg, src, start)
}

fn run_iterated(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    cfg: &AttackConfig,
    src: &GradientSource,
    start: Matrix,
) -> Result<FeatureMatrix> {
    let mut current = start;
    for _ in 0..cfg.steps {
        let grad = input_grad(net, &current, y, src)?;
        let stepped = current.zip_map(&grad, |xi, g| xi + cfg.alpha * sign(g));
        current = clip_ball(&stepped, x, cfg.epsilon);
    }
    Ok(current)
}

fn pick_targets(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    rule: TargetRule,
) -> Result<Vec<usize>> {
    match rule {
        TargetRule::Fixed(t) => {
            if t >= net.num_classes() {
                return Err(Error::parameter(format!(
                    "target class {t} out of range for {} classes",
                    net.num_classes()
                )));
            }
            Ok(vec![t; x.rows()])
        }
        TargetRule::BestOther => {
            let logits = net.logits(x)?;
            let truth = y.argmax_rows();
            Ok(logits
                .row_iter()
                .zip(&truth)
                .map(|(row, &true_class)| {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (j, &v) in row.iter().enumerate() {
                        if j != true_class && v > best_v {
                            best_v = v;
                            best = j;
                        }
                    }
                    best
                })
                .collect())
        }
    }
}

fn local_adam(param: &mut Matrix, grad: &Matrix, m: &mut Matrix, v: &mut Matrix, t: i32, lr: f64) {
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..param.data().len() {
        let g = grad.data()[i];
        m.data_mut()[i] = beta1 * m.data()[i] + (1.0 - beta1) * g;
        v.data_mut()[i] = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
        let m_hat = m.data()[i] / bc1;
        let v_hat = v.data()[i] / bc2;
        param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// l2 margin attack. The perturbed image is parametrized as
/// (tanh(w) + 1) / 2 with w initialized at atanh(2 x - 1) after squeezing x
/// into [1e-6, 1 - 1e-6]; Adam minimizes
/// |x_adv - x|_2^2 + c * max(-kappa, max_{i != t} Z_i - Z_t), where Z are the
/// linear-branch logits under either gradient source and t follows the
/// target rule (best-other: highest non-true logit at the clean input).
pub fn cw_l2(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    cfg: &AttackConfig,
    src: &GradientSource,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    src.validate()?;
    if cfg.cw_iters == 0 {
        return Err(Error::parameter("margin attack needs at least 1 iteration"));
    }
    let targets = pick_targets(net, x, y, cfg.target_rule)?;

    let squeezed = x.map(|v| v.clamp(1e-6, 1.0 - 1e-6));
    let mut w = squeezed.map(|v| (2.0 * v - 1.0).atanh());
    let mut adam_m = Matrix::zeros(w.rows(), w.cols());
    let mut adam_v = Matrix::zeros(w.rows(), w.cols());

    for t in 1..=cfg.cw_iters {
        let mut tape = crate::autodiff::Tape::new();
        let wid = tape.leaf(w.clone());
        let th = tape.tanh(wid);
        let adv = tape.affine_scalar(th, 0.5, 0.5);
        let clean = tape.leaf(x.clone());
        let delta = tape.sub(adv, clean);
        let dist = tape.sum_squares(delta);
        let logits = net.logits_on_tape(&mut tape, adv)?;
        let hinge = tape.cw_hinge(logits, targets.clone(), cfg.kappa);
        let weighted = tape.scale(hinge, cfg.c);
        let objective = tape.add(dist, weighted);
        if !tape.value(objective)[(0, 0)].is_finite() {
            return Err(Error::numeric(format!(
                "non-finite margin-attack objective at iteration {t}"
            )));
        }
        tape.backward(objective)?;
        let grad = tape
            .grad(wid)
            .ok_or_else(|| Error::numeric("perturbation unreachable from objective"))?
            .clone();
        local_adam(&mut w, &grad, &mut adam_m, &mut adam_v, t as i32, cfg.cw_lr);
    }
    Ok(w.map(|wi| (0.5 * (wi.tanh() + 1.0)).clamp(0.0, 1.0)))
}

/// JSON manifest accompanying exported adversarial batches.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackManifest {
    pub attack: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
    pub source: String,
}

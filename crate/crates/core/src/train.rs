//! Alternating training of the dual-head net and the interpolating test
//! procedure.
//!
//! One outer pass trains the extractor + buffer + linear head by plain ERM,
//! re-splits a template, then fine-tunes the buffer block against the
//! interpolating head. The interpolating head has no tractable gradient, so
//! its loss value is routed through the linear branch's computational graph:
//! the linear-branch gradient is rescaled by loss_wnll / loss_linear, which
//! reduces to the plain gradient when the two losses agree.
//!
//! Every RNG draw is derived from (seed, pass, stage, epoch), and optimizer
//! state is fresh per stage, so training can stop after any stage and resume
//! bitwise-identically from a checkpoint.

use rand::seq::SliceRandom;

use crate::data::{accuracy, classes_of, split_template, SplitSpec, TemplateSet, TemplateSplit};
use crate::error::{Error, Result};
use crate::graph::{knn_exact, KnnParams};
use crate::interpolate::{vote, wnll_interpolate, InterpolationResult, WnllConfig};
use crate::matrix::{FeatureMatrix, LabelMatrix, Matrix};
use crate::net::{
    cross_entropy, DualHeadNet, Forward, LayerGrads, NetGrads, Optim, Optimizer, ParamMask,
};
use crate::rng;

const TAG_LINEAR_SHUFFLE: u64 = 0x11;
const TAG_WNLL_SHUFFLE: u64 = 0x12;
const TAG_TEMPLATE: u64 = 0x13;
pub(crate) const TAG_NOISE: u64 = 0x14;

/// Per-batch input transform (net, batch_x, batch_y, derived seed) applied
/// before the loss; adversarial training perturbs batches through this.
pub(crate) type PerturbHook<'a> =
    &'a dyn Fn(&DualHeadNet, &Matrix, &Matrix, u64) -> Result<Matrix>;

/// Linear-branch and interpolating-branch loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub loss_linear: f64,
    pub loss_wnll: f64,
}

/// Schedule and batching of the alternating procedure.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Outer alternations N.
    pub alternations: usize,
    /// Linear-stage epochs N1 per pass.
    pub epochs_linear: usize,
    /// Interpolation-stage epochs N2 per pass.
    pub epochs_wnll: usize,
    /// Piecewise-constant linear-stage schedule: (first epoch, lr), 1-based.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Fixed learning rate of the interpolation stage.
    pub lr_wnll: f64,
    pub batch_linear: usize,
    pub batch_wnll: usize,
    pub knn: KnnParams,
    pub wnll: WnllConfig,
    /// Fraction of the training data reserved as template at each re-split.
    pub template_fraction: f64,
    pub seed: u64,
    /// Rescale the surrogate gradient by loss_wnll / loss_linear (default);
    /// false keeps the raw linear-branch gradient.
    pub surrogate_rescale: bool,
    /// Also update the extractor during the interpolation stage (off by
    /// default; the extractor stays frozen for stability).
    pub unfreeze_theta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alternations: 2,
            epochs_linear: 50,
            epochs_wnll: 5,
            lr_schedule: vec![(1, 0.05)],
            lr_wnll: 5e-4,
            batch_linear: 128,
            batch_wnll: 2000,
            knn: KnnParams::default(),
            wnll: WnllConfig::default(),
            template_fraction: 0.5,
            seed: 0,
            surrogate_rescale: true,
            unfreeze_theta: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alternations == 0 || self.epochs_linear == 0 || self.epochs_wnll == 0 {
            return Err(Error::parameter("all schedule counts must be at least 1"));
        }
        if self.batch_linear == 0 || self.batch_wnll == 0 {
            return Err(Error::parameter("batch sizes must be at least 1"));
        }
        if self.batch_wnll < self.knn.m + 1 {
            return Err(Error::parameter(format!(
                "batch_wnll = {} must be at least m + 1 = {}",
                self.batch_wnll,
                self.knn.m + 1
            )));
        }
        if self.lr_schedule.is_empty() {
            return Err(Error::parameter("lr_schedule must not be empty"));
        }
        if !(self.lr_wnll > 0.0) || self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(Error::parameter("learning rates must be positive"));
        }
        if !(self.template_fraction > 0.0 && self.template_fraction < 1.0) {
            return Err(Error::parameter("template_fraction must lie in (0,1)"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr_schedule[0].1;
        for &(start, value) in &self.lr_schedule {
            if epoch >= start {
                lr = value;
            }
        }
        lr
    }

    pub(crate) fn template_spec(&self, pass: usize) -> SplitSpec {
        SplitSpec {
            template_fraction: self.template_fraction,
            stratified: true,
            seed: rng::derive_seed(self.seed, &[TAG_TEMPLATE, pass as u64]),
        }
    }
}

/// One training-log record (serialized as JSON lines by callers).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageRecord {
    pub pass: usize,
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

pub type TrainLog = Vec<StageRecord>;

/// Identifies a completed stage for checkpoint/resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StageId {
    pub pass: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    Linear,
    Wnll,
}

/// Optional training hooks: an evaluation set for per-stage accuracy logging,
/// a resume point, and a stage-completion callback for checkpointing.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub eval: Option<(&'a FeatureMatrix, &'a LabelMatrix)>,
    pub resume_after: Option<StageId>,
    #[allow(clippy::type_complexity)]
    pub on_stage: Option<&'a mut dyn FnMut(&DualHeadNet, StageId) -> Result<()>>,
}

fn shuffled_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[]);
    order.shuffle(&mut rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// ERM training of extractor + buffer + linear head with mini-batch SGD on
/// the cross-entropy loss.
pub fn train_linear_stage(
    net: &mut DualHeadNet,
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    linear_stage_inner(net, features, labels, cfg, 1, 1.0, log, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_stage_inner(
    net: &mut DualHeadNet,
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    cfg: &TrainConfig,
    pass: usize,
    lr_factor: f64,
    log: &mut TrainLog,
    perturb: Option<PerturbHook<'_>>,
) -> Result<()> {
    cfg.validate()?;
    if features.rows() == 0 {
        return Err(Error::parameter("training data is empty"));
    }
    let mut optimizer = Optimizer::new(Optim::sgd(cfg.lr_at(1) * lr_factor), net)?;

    for epoch in 1..=cfg.epochs_linear {
        optimizer.set_lr(cfg.lr_at(epoch) * lr_factor);
        let seed = rng::derive_seed(cfg.seed, &[TAG_LINEAR_SHUFFLE, pass as u64, epoch as u64]);
        let mut epoch_loss = 0.0;
        let batches = shuffled_batches(features.rows(), cfg.batch_linear, seed);
        let num_batches = batches.len();
        for (batch_no, batch) in batches.into_iter().enumerate() {
            let mut x = features.select_rows(&batch);
            let y = labels.select_rows(&batch);
            if let Some(hook) = perturb {
                let noise_seed = rng::derive_seed(
                    cfg.seed,
                    &[TAG_NOISE, 0, pass as u64, epoch as u64, batch_no as u64],
                );
                x = hook(net, &x, &y, noise_seed)?;
            }
            let mut fwd = net.forward_features(&x)?;
            net.forward_linear(&mut fwd)?;
            let loss = fwd.linear_loss(&y)?;
            let loss_value = fwd.tape.value(loss)[(0, 0)];
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite linear loss at pass {pass} epoch {epoch} batch {batch_no}"
                )));
            }
            fwd.tape.backward(loss)?;
            let grads = fwd.grads(net);
            optimizer.step(net, &grads, ParamMask::ALL)?;
            epoch_loss += loss_value;
        }
        log.push(StageRecord {
            pass,
            stage: "linear".into(),
            epoch,
            loss: epoch_loss / num_batches as f64,
            eval_accuracy: None,
        });
    }
    Ok(())
}

/// Renormalized cross-entropy between interpolated scores and labels: rows
/// are floored at 1e-12 and rescaled into distributions before the log.
pub fn wnll_loss(scores: &Matrix, labels: &LabelMatrix) -> f64 {
    assert_eq!(scores.shape(), labels.shape(), "wnll loss shape mismatch");
    let mut total = 0.0;
    for (srow, lrow) in scores.row_iter().zip(labels.row_iter()) {
        let floored: Vec<f64> = srow.iter().map(|&v| v.max(1e-12)).collect();
        let sum: f64 = floored.iter().sum();
        for (&p, &l) in floored.iter().zip(lrow) {
            if l > 0.0 {
                total -= l * (p / sum).ln();
            }
        }
    }
    total / scores.rows() as f64
}

/// Buffer-block gradient via the linear branch's computational graph: runs
/// backward from the linear loss, then rescales by
/// loss_wnll / max(loss_linear, 1e-12). The rescale substitutes the
/// interpolating branch's loss value into the linear branch's gradient;
/// `rescale = false` keeps the raw linear-branch gradient.
pub fn surrogate_backward(
    fwd: &mut Forward,
    net: &DualHeadNet,
    labels: &LabelMatrix,
    loss_wnll: f64,
    rescale: bool,
) -> Result<(LayerGrads, LossPair)> {
    if fwd.logits.is_none() {
        return Err(Error::usage(
            "surrogate backward needs a linear-branch forward on the tape",
        ));
    }
    let loss_node = fwd.linear_loss(labels)?;
    let loss_linear = fwd.tape.value(loss_node)[(0, 0)];
    fwd.tape.backward(loss_node)?;
    let mut buffer = fwd.grads(net).buffer;
    if rescale {
        buffer.scale(loss_wnll / loss_linear.max(1e-12));
    }
    Ok((
        buffer,
        LossPair {
            loss_linear,
            loss_wnll,
        },
    ))
}

/// Interpolation scores of the already-forwarded batch rows against the
/// template, both in buffered-feature space.
fn interpolate_batch(
    fwd: &Forward,
    template_features_buffered: &Matrix,
    template: &TemplateSet,
    knn: KnnParams,
    wnll: &WnllConfig,
) -> Result<Matrix> {
    let batch_hat = fwd.x_hat_value();
    let batch_len = batch_hat.rows();
    let combined = batch_hat.vstack(template_features_buffered)?;
    let template_indices: Vec<usize> = (batch_len..combined.rows()).collect();
    let graph = knn_exact(&combined, knn)?;
    let result = wnll_interpolate(&graph, template, &template_indices, wnll)?;
    Ok(result.u.select_rows(&(0..batch_len).collect::<Vec<_>>()))
}

/// Fine-tunes the buffer block against the interpolating head: per batch,
/// interpolate buffered features over the template, take the renormalized
/// cross-entropy on the batch rows only, and push it through the linear
/// branch's gradient. Extractor and linear head stay bitwise frozen unless
/// `unfreeze_theta` is set.
pub fn train_wnll_stage(
    net: &mut DualHeadNet,
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    template_spec: &SplitSpec,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let split = split_template(features, labels, template_spec)?;
    wnll_stage_inner(net, &split, cfg, 1, 1.0, log, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn wnll_stage_inner(
    net: &mut DualHeadNet,
    split: &TemplateSplit,
    cfg: &TrainConfig,
    pass: usize,
    lr_factor: f64,
    log: &mut TrainLog,
    perturb: Option<PerturbHook<'_>>,
) -> Result<()> {
    cfg.validate()?;
    let mask = if cfg.unfreeze_theta {
        ParamMask {
            theta: true,
            buffer: true,
            linear: false,
        }
    } else {
        ParamMask::BUFFER_ONLY
    };
    let mut optimizer = Optimizer::new(Optim::sgd(cfg.lr_wnll * lr_factor), net)?;

    for epoch in 1..=cfg.epochs_wnll {
        let seed = rng::derive_seed(cfg.seed, &[TAG_WNLL_SHUFFLE, pass as u64, epoch as u64]);
        let mut epoch_loss = 0.0;
        let batches = shuffled_batches(split.train_features.rows(), cfg.batch_wnll, seed);
        let num_batches = batches.len();
        for (batch_no, batch) in batches.into_iter().enumerate() {
            let mut x = split.train_features.select_rows(&batch);
            let y = split.train_labels.select_rows(&batch);
            if let Some(hook) = perturb {
                let noise_seed = rng::derive_seed(
                    cfg.seed,
                    &[TAG_NOISE, 1, pass as u64, epoch as u64, batch_no as u64],
                );
                x = hook(net, &x, &y, noise_seed)?;
            }
            let template_hat = net.buffered_features(&split.template.features)?;
            let mut fwd = net.forward_features(&x)?;
            let scores =
                interpolate_batch(&fwd, &template_hat, &split.template, cfg.knn, &cfg.wnll)?;
            let loss_wnll = wnll_loss(&scores, &y);
            if !loss_wnll.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite interpolation loss at pass {pass} epoch {epoch}"
                )));
            }
            net.forward_linear(&mut fwd)?;
            let (buffer_grads, _) =
                surrogate_backward(&mut fwd, net, &y, loss_wnll, cfg.surrogate_rescale)?;
            let grads = if cfg.unfreeze_theta {
                let ratio = if cfg.surrogate_rescale {
                    let linear_loss =
                        cross_entropy(fwd.tape.value(fwd.logits.expect("linear ran")), &y);
                    loss_wnll / linear_loss.max(1e-12)
                } else {
                    1.0
                };
                let mut all = fwd.grads(net);
                for layer in &mut all.theta {
                    layer.scale(ratio);
                }
                all.buffer = buffer_grads;
                all.linear = None;
                all
            } else {
                NetGrads::buffer_only(buffer_grads, net)
            };
            optimizer.step(net, &grads, mask)?;
            epoch_loss += loss_wnll;
        }
        log.push(StageRecord {
            pass,
            stage: "wnll".into(),
            epoch,
            loss: epoch_loss / num_batches as f64,
            eval_accuracy: None,
        });
    }
    Ok(())
}

/// Full alternating schedule: N passes of (linear stage; template re-split;
/// interpolation stage). From the second pass on, all learning rates are
/// multiplied by 1/5. Returns the final template split for inference.
pub fn alternating_train(
    net: &mut DualHeadNet,
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
    log: &mut TrainLog,
) -> Result<TemplateSplit> {
    cfg.validate()?;
    let mut last_split = None;
    for pass in 1..=cfg.alternations {
        let lr_factor = if pass >= 2 { 0.2 } else { 1.0 };
        let split = split_template(features, labels, &cfg.template_spec(pass))?;

        if !stage_done(hooks.resume_after, pass, Stage::Linear) {
            linear_stage_inner(net, features, labels, cfg, pass, lr_factor, log, None)?;
            if let Some((ef, el)) = hooks.eval {
                let predictions = classes_of(&net.logits(ef)?);
                push_eval(log, pass, "linear-eval", accuracy(&predictions, &classes_of(el)));
            }
            if let Some(cb) = hooks.on_stage.as_deref_mut() {
                cb(net, StageId { pass, stage: Stage::Linear })?;
            }
        }

        if !stage_done(hooks.resume_after, pass, Stage::Wnll) {
            wnll_stage_inner(net, &split, cfg, pass, lr_factor, log, None)?;
            if let Some((ef, el)) = hooks.eval {
                let predictions = test_wnll(net, ef, &split.template, cfg)?;
                push_eval(log, pass, "wnll-eval", accuracy(&predictions, &classes_of(el)));
            }
            if let Some(cb) = hooks.on_stage.as_deref_mut() {
                cb(net, StageId { pass, stage: Stage::Wnll })?;
            }
        }
        last_split = Some(split);
    }
    Ok(last_split.expect("at least one alternation"))
}

pub(crate) fn stage_done(resume_after: Option<StageId>, pass: usize, stage: Stage) -> bool {
    let Some(done) = resume_after else {
        return false;
    };
    let rank = |p: usize, s: Stage| 2 * p + usize::from(matches!(s, Stage::Wnll));
    rank(pass, stage) <= rank(done.pass, done.stage)
}

fn push_eval(log: &mut TrainLog, pass: usize, stage: &str, acc: f64) {
    log.push(StageRecord {
        pass,
        stage: stage.into(),
        epoch: 0,
        loss: f64::NAN,
        eval_accuracy: Some(acc),
    });
}

/// Inference: queries and template are pushed through the buffer; templates
/// larger than `batch_wnll` are partitioned and the per-batch interpolation
/// results aggregated by majority vote.
pub fn test_wnll(
    net: &DualHeadNet,
    queries: &FeatureMatrix,
    template: &TemplateSet,
    cfg: &TrainConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let query_hat = net.buffered_features(queries)?;
    let template_hat = net.buffered_features(&template.features)?;
    let query_rows: Vec<usize> = (0..query_hat.rows()).collect();

    let chunks: Vec<Vec<usize>> = (0..template.len())
        .collect::<Vec<_>>()
        .chunks(cfg.batch_wnll)
        .map(<[usize]>::to_vec)
        .collect();

    let mut results: Vec<InterpolationResult> = Vec::with_capacity(chunks.len());
    for chunk in &chunks {
        let chunk_features = template_hat.select_rows(chunk);
        let chunk_template = TemplateSet::new(
            template.features.select_rows(chunk),
            template.labels.select_rows(chunk),
        )?;
        let combined = query_hat.vstack(&chunk_features)?;
        let template_indices: Vec<usize> = (query_hat.rows()..combined.rows()).collect();
        let graph = knn_exact(&combined, cfg.knn)?;
        let result = wnll_interpolate(&graph, &chunk_template, &template_indices, &cfg.wnll)?;
        results.push(result.select_rows(&query_rows));
    }
    vote(&results)
}

/// Plain multinomial logistic regression on raw features; the softmax
/// baseline the interpolating classifier is compared against.
pub fn train_softmax_regression(
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    if epochs == 0 || batch == 0 || !(lr > 0.0) {
        return Err(Error::parameter("bad softmax-regression settings"));
    }
    let classes = labels.cols();
    let mut weights = Matrix::zeros(features.cols(), classes);
    let mut bias = Matrix::zeros(1, classes);

    for epoch in 1..=epochs {
        let shuffle_seed = rng::derive_seed(seed, &[0x31, epoch as u64]);
        for batch_rows in shuffled_batches(features.rows(), batch, shuffle_seed) {
            let x = features.select_rows(&batch_rows);
            let y = labels.select_rows(&batch_rows);
            let mut tape = crate::autodiff::Tape::new();
            let xid = tape.leaf(x);
            let wid = tape.leaf(weights.clone());
            let bid = tape.leaf(bias.clone());
            let z = tape.matmul(xid, wid);
            let logits = tape.add_bias(z, bid);
            let loss = tape.softmax_cross_entropy(logits, y);
            if !tape.value(loss)[(0, 0)].is_finite() {
                return Err(Error::numeric("non-finite softmax-regression loss"));
            }
            tape.backward(loss)?;
            weights.add_scaled(tape.grad(wid).expect("reached"), -lr);
            bias.add_scaled(tape.grad(bid).expect("reached"), -lr);
        }
    }
    Ok((weights, bias))
}

pub fn softmax_regression_predict(
    weights: &Matrix,
    bias: &Matrix,
    features: &FeatureMatrix,
) -> Vec<usize> {
    let mut logits = features.matmul(weights);
    for i in 0..logits.rows() {
        for (v, &b) in logits.row_mut(i).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
    logits.argmax_rows()
}

//! Projected-gradient adversarial training of both branches and the
//! white-box / black-box robust-evaluation protocol.
//!
//! Adversarial training reuses the natural stage drivers with a per-batch
//! perturbation hook: uniform noise in the eps-ball followed by M iterated
//! sign steps against the branch-appropriate gradient source. A zero budget
//! with one step therefore reproduces natural training bitwise.

use std::collections::BTreeMap;

use crate::attack::{self, AttackConfig, GradientSource};
use crate::data::{accuracy, classes_of, split_template, TemplateSet, TemplateSplit};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, LabelMatrix, Matrix};
use crate::net::DualHeadNet;
use crate::rng;
use crate::train::{
    self, test_wnll, Stage, StageId, TrainConfig, TrainHooks, TrainLog,
};

/// Which head classifies and which gradient source drives crafted attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Linear,
    Wnll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
    CwL2,
}

/// One evaluation attack: a report column.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NamedAttack {
    pub name: String,
    pub kind: AttackKind,
    pub cfg: AttackConfig,
}

/// Adversarial-training and evaluation settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RobustConfig {
    /// Training-time attack (eps, alpha, M drive the inner maximization).
    pub attack: AttackConfig,
    pub train: TrainConfig,
    pub eval_attacks: Vec<NamedAttack>,
    /// Head evaluated (and gradient source crafted against) on the target.
    pub head: Head,
    /// Gradient source used when crafting on a black-box oracle.
    pub oracle_head: Head,
    /// Query/template batch size of the surrogate gradient source.
    pub surrogate_batch: usize,
}

impl RobustConfig {
    pub fn new(train: TrainConfig, attack: AttackConfig) -> Self {
        RobustConfig {
            attack,
            train,
            eval_attacks: Vec::new(),
            head: Head::Wnll,
            oracle_head: Head::Linear,
            surrogate_batch: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        if !(self.attack.epsilon > 0.0) {
            return Err(Error::parameter(
                "adversarial training needs a positive budget",
            ));
        }
        if self.attack.steps == 0 {
            return Err(Error::parameter("adversarial training needs at least 1 step"));
        }
        for named in &self.eval_attacks {
            named.cfg.validate()?;
        }
        Ok(())
    }
}

/// Accuracy report mirroring the natural/robust table layout.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RobustReport {
    pub natural_accuracy: f64,
    /// One entry per evaluation attack, keyed by its configured name.
    pub robust_accuracy: BTreeMap<String, f64>,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_id: Option<String>,
}

fn budget_assert(x_adv: &Matrix, x: &Matrix, epsilon: f64) {
    let max_diff = x_adv
        .zip_map(x, |a, b| (a - b).abs())
        .data()
        .iter()
        .copied()
        .fold(0.0, f64::max);
    assert!(
        max_diff <= epsilon * (1.0 + 1e-12) + 1e-15,
        "budget violated: {max_diff} > {epsilon}"
    );
    assert!(
        x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
        "box constraint violated"
    );
}

/// Alternating adversarial training: both stages perturb each batch with
/// uniform noise in the eps-ball followed by M clipped sign steps, using the
/// linear head's gradient in the linear stage and the interpolating
/// surrogate in the buffer stage. Everything else (schedules, re-splits,
/// masking, learning-rate damping) matches natural alternating training.
///
/// With eps = 0 and M = 1 the perturbation collapses to the identity and the
/// parameter trajectory equals [`train::alternating_train`] bitwise.
pub fn pgd_train(
    net: &mut DualHeadNet,
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    cfg: &RobustConfig,
    mut hooks: TrainHooks<'_>,
    log: &mut TrainLog,
) -> Result<TemplateSplit> {
    cfg.train.validate()?;
    cfg.attack.validate()?;
    let mut last_split = None;

    for pass in 1..=cfg.train.alternations {
        let lr_factor = if pass >= 2 { 0.2 } else { 1.0 };
        let split = split_template(features, labels, &cfg.train.template_spec(pass))?;

        if !train::stage_done(hooks.resume_after, pass, Stage::Linear) {
            let linear_perturb = |net: &DualHeadNet,
                                  x: &Matrix,
                                  y: &Matrix,
                                  noise_seed: u64|
             -> Result<Matrix> {
                let adv = attack::ifgsm_with_noise(
                    net,
                    x,
                    y,
                    &cfg.attack,
                    &GradientSource::LinearHead,
                    noise_seed,
                )?;
                budget_assert(&adv, x, cfg.attack.epsilon);
                Ok(adv)
            };
            train::linear_stage_inner(
                net,
                features,
                labels,
                &cfg.train,
                pass,
                lr_factor,
                log,
                Some(&linear_perturb),
            )?;
            if let Some(cb) = hooks.on_stage.as_deref_mut() {
                cb(net, StageId { pass, stage: Stage::Linear })?;
            }
        }

        if !train::stage_done(hooks.resume_after, pass, Stage::Wnll) {
            let template = &split.template;
            let wnll_perturb = |net: &DualHeadNet,
                                x: &Matrix,
                                y: &Matrix,
                                noise_seed: u64|
             -> Result<Matrix> {
                let src = GradientSource::WnllSurrogate {
                    template,
                    batch: cfg.surrogate_batch,
                    knn: cfg.train.knn,
                    wnll: cfg.train.wnll,
                };
                let adv = attack::ifgsm_with_noise(net, x, y, &cfg.attack, &src, noise_seed)?;
                budget_assert(&adv, x, cfg.attack.epsilon);
                Ok(adv)
            };
            train::wnll_stage_inner(
                net,
                &split,
                &cfg.train,
                pass,
                lr_factor,
                log,
                Some(&wnll_perturb),
            )?;
            if let Some(cb) = hooks.on_stage.as_deref_mut() {
                cb(net, StageId { pass, stage: Stage::Wnll })?;
            }
        }
        last_split = Some(split);
    }
    Ok(last_split.expect("at least one alternation"))
}

/// Adversarial training of the linear branch only (no interpolating
/// stage): the conventional projected-gradient baseline, and the black-box
/// oracle counterpart of a dual-head run. Matches the linear stages of
/// [`pgd_train`] pass for pass.
pub fn pgd_train_linear(
    net: &mut DualHeadNet,
    features: &FeatureMatrix,
    labels: &LabelMatrix,
    cfg: &RobustConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.train.validate()?;
    cfg.attack.validate()?;
    for pass in 1..=cfg.train.alternations {
        let lr_factor = if pass >= 2 { 0.2 } else { 1.0 };
        let linear_perturb =
            |net: &DualHeadNet, x: &Matrix, y: &Matrix, noise_seed: u64| -> Result<Matrix> {
                let adv = attack::ifgsm_with_noise(
                    net,
                    x,
                    y,
                    &cfg.attack,
                    &GradientSource::LinearHead,
                    noise_seed,
                )?;
                budget_assert(&adv, x, cfg.attack.epsilon);
                Ok(adv)
            };
        train::linear_stage_inner(
            net,
            features,
            labels,
            &cfg.train,
            pass,
            lr_factor,
            log,
            Some(&linear_perturb),
        )?;
    }
    Ok(())
}

fn classify(
    net: &DualHeadNet,
    x: &FeatureMatrix,
    template: &TemplateSet,
    cfg: &RobustConfig,
) -> Result<Vec<usize>> {
    match cfg.head {
        Head::Linear => Ok(classes_of(&net.logits(x)?)),
        Head::Wnll => test_wnll(net, x, template, &cfg.train),
    }
}

fn craft(
    attacker: &DualHeadNet,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    named: &NamedAttack,
    head: Head,
    template: &TemplateSet,
    cfg: &RobustConfig,
) -> Result<Matrix> {
    let src = match head {
        Head::Linear => GradientSource::LinearHead,
        Head::Wnll => GradientSource::WnllSurrogate {
            template,
            batch: cfg.surrogate_batch,
            knn: cfg.train.knn,
            wnll: cfg.train.wnll,
        },
    };
    match named.kind {
        AttackKind::Fgsm => attack::fgsm(attacker, x, y, &named.cfg, &src),
        AttackKind::Ifgsm => attack::ifgsm(attacker, x, y, &named.cfg, &src),
        AttackKind::CwL2 => attack::cw_l2(attacker, x, y, &named.cfg, &src),
    }
}

/// Natural and per-attack robust accuracies over one fixed test set.
///
/// White-box: attacks are crafted on `net` itself. Black-box: attacks are
/// crafted on the `oracle` model (in the white-box fashion, with
/// `oracle_head`'s gradient source) and classified by `net`. The net is
/// never mutated.
pub fn evaluate(
    net: &DualHeadNet,
    test_features: &FeatureMatrix,
    test_labels: &LabelMatrix,
    template: &TemplateSet,
    cfg: &RobustConfig,
    oracle: Option<&DualHeadNet>,
) -> Result<RobustReport> {
    let truth = classes_of(test_labels);
    let natural = accuracy(&classify(net, test_features, template, cfg)?, &truth);

    let mut robust = BTreeMap::new();
    for named in &cfg.eval_attacks {
        let adversarial = match oracle {
            Some(oracle_net) => craft(
                oracle_net,
                test_features,
                test_labels,
                named,
                cfg.oracle_head,
                template,
                cfg,
            )?,
            None => craft(net, test_features, test_labels, named, cfg.head, template, cfg)?,
        };
        let predictions = classify(net, &adversarial, template, cfg)?;
        robust.insert(named.name.clone(), accuracy(&predictions, &truth));
    }

    Ok(RobustReport {
        natural_accuracy: natural,
        robust_accuracy: robust,
        mode: if oracle.is_some() { "black-box" } else { "white-box" }.into(),
        oracle_id: oracle.map(|o| format!("seed-{}", o.rng_seed)),
    })
}

/// Deterministic noise seed helper shared with tests.
pub fn noise_seed(train_seed: u64, stage: u64, pass: usize, epoch: usize, batch: usize) -> u64 {
    rng::derive_seed(
        train_seed,
        &[train::TAG_NOISE, stage, pass as u64, epoch as u64, batch as u64],
    )
}

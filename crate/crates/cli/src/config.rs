//! Versioned JSON run configuration with a strict schema: unknown keys are
//! rejected and schema errors carry JSON paths.

use std::path::{Path, PathBuf};

use laplace_net_core::attack::{AttackConfig, TargetRule};
use laplace_net_core::graph::KnnParams;
use laplace_net_core::interpolate::WnllConfig;
use laplace_net_core::robust::{AttackKind, Head, NamedAttack, RobustConfig};
use laplace_net_core::train::{Stage, StageId, TrainConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub graph: Option<GraphSection>,
    #[serde(default)]
    pub net: Option<NetSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub robust: Option<RobustSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    TwoMoons {
        n_per_class: usize,
        noise_std: f64,
        /// Mixed into the run seed so multiple sources stay independent.
        #[serde(default)]
        seed_offset: u64,
        /// Map coordinates into [0,1]^2 (required before image-unit attacks).
        #[serde(default)]
        unit_box: bool,
    },
    Blobs {
        n_per_class: usize,
        centers: Vec<Vec<f64>>,
        std_dev: f64,
        #[serde(default)]
        seed_offset: u64,
    },
    SynthDigits {
        count: usize,
        #[serde(default)]
        seed_offset: u64,
    },
    Csv {
        path: PathBuf,
        label_column: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: DataSource,
    #[serde(default)]
    pub eval: Option<DataSource>,
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Use randomized-projection-tree approximate neighbors.
    #[serde(default)]
    pub approx_probes: Option<usize>,
}

fn default_m() -> usize {
    30
}
fn default_n() -> usize {
    15
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            m: 30,
            n: 15,
            approx_probes: None,
        }
    }
}

impl GraphSection {
    pub fn knn(&self) -> KnnParams {
        KnnParams {
            m: self.m,
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default)]
    pub theta_widths: Vec<usize>,
    #[serde(default = "default_buffer")]
    pub buffer_width: usize,
    /// Load parameters from this checkpoint instead of fresh init.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_buffer() -> usize {
    64
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            theta_widths: Vec::new(),
            buffer_width: 64,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Linear,
    Wnll,
}

#[derive(Debug, Clone, Copy, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct ResumePoint {
    pub pass: usize,
    pub stage: StageName,
}

impl ResumePoint {
    pub fn stage_id(&self) -> StageId {
        StageId {
            pass: self.pass,
            stage: match self.stage {
                StageName::Linear => Stage::Linear,
                StageName::Wnll => Stage::Wnll,
            },
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alternations: usize,
    pub epochs_linear: usize,
    pub epochs_wnll: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub lr_wnll: f64,
    pub batch_linear: usize,
    pub batch_wnll: usize,
    pub template_fraction: f64,
    pub surrogate_rescale: bool,
    pub unfreeze_theta: bool,
    pub mu_override: Option<f64>,
    pub solver_tol: f64,
    /// Baseline softmax-regression epochs for the interpolate command.
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    /// Continue a checkpointed run after this completed stage.
    pub resume_after: Option<ResumePoint>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            alternations: d.alternations,
            epochs_linear: d.epochs_linear,
            epochs_wnll: d.epochs_wnll,
            lr_schedule: d.lr_schedule,
            lr_wnll: d.lr_wnll,
            batch_linear: d.batch_linear,
            batch_wnll: d.batch_wnll,
            template_fraction: d.template_fraction,
            surrogate_rescale: d.surrogate_rescale,
            unfreeze_theta: d.unfreeze_theta,
            mu_override: None,
            solver_tol: WnllConfig::default().solver_tol,
            baseline_epochs: 30,
            baseline_lr: 0.1,
            resume_after: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, knn: KnnParams, seed: u64) -> TrainConfig {
        TrainConfig {
            alternations: self.alternations,
            epochs_linear: self.epochs_linear,
            epochs_wnll: self.epochs_wnll,
            lr_schedule: self.lr_schedule.clone(),
            lr_wnll: self.lr_wnll,
            batch_linear: self.batch_linear,
            batch_wnll: self.batch_wnll,
            knn,
            wnll: WnllConfig {
                mu_override: self.mu_override,
                solver_tol: self.solver_tol,
                max_iters: None,
            },
            template_fraction: self.template_fraction,
            seed,
            surrogate_rescale: self.surrogate_rescale,
            unfreeze_theta: self.unfreeze_theta,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackName {
    Fgsm,
    Ifgsm,
    CwL2,
}

impl AttackName {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackName::Fgsm => AttackKind::Fgsm,
            AttackName::Ifgsm => AttackKind::Ifgsm,
            AttackName::CwL2 => AttackKind::CwL2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackName::Fgsm => "fgsm",
            AttackName::Ifgsm => "ifgsm",
            AttackName::CwL2 => "cw-l2",
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceName {
    LinearHead,
    WnllSurrogate,
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_cw_lr")]
    pub cw_lr: f64,
    #[serde(default = "default_cw_iters")]
    pub cw_iters: usize,
}

fn default_epsilon() -> f64 {
    8.0 / 255.0
}
fn default_alpha() -> f64 {
    2.0 / 255.0
}
fn default_steps() -> usize {
    10
}
fn default_c() -> f64 {
    10.0
}
fn default_cw_lr() -> f64 {
    6e-3
}
fn default_cw_iters() -> usize {
    50
}

impl Default for AttackParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl AttackParams {
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            kappa: self.kappa,
            c: self.c,
            cw_lr: self.cw_lr,
            cw_iters: self.cw_iters,
            target_rule: TargetRule::BestOther,
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackName,
    #[serde(default)]
    pub params: AttackParams,
    #[serde(default = "default_source")]
    pub source: SourceName,
    #[serde(default = "default_surrogate_batch")]
    pub batch: usize,
}

fn default_source() -> SourceName {
    SourceName::WnllSurrogate
}
fn default_surrogate_batch() -> usize {
    500
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAttack {
    pub name: String,
    pub kind: AttackName,
    #[serde(default)]
    pub params: AttackParams,
}

#[derive(Debug, Clone, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSection {
    #[serde(default)]
    pub attack: AttackParams,
    #[serde(default)]
    pub eval_attacks: Vec<EvalAttack>,
    #[serde(default = "default_head")]
    pub head: HeadName,
    #[serde(default = "default_oracle_head")]
    pub oracle_head: HeadName,
    #[serde(default)]
    pub oracle_checkpoint: Option<PathBuf>,
    #[serde(default = "default_surrogate_batch")]
    pub surrogate_batch: usize,
}

impl Default for RobustSection {
    fn default() -> Self {
        RobustSection {
            attack: AttackParams::default(),
            eval_attacks: Vec::new(),
            head: HeadName::Wnll,
            oracle_head: HeadName::Linear,
            oracle_checkpoint: None,
            surrogate_batch: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadName {
    Linear,
    Wnll,
}

fn default_head() -> HeadName {
    HeadName::Wnll
}
fn default_oracle_head() -> HeadName {
    HeadName::Linear
}

impl HeadName {
    pub fn head(&self) -> Head {
        match self {
            HeadName::Linear => Head::Linear,
            HeadName::Wnll => Head::Wnll,
        }
    }
}

impl RobustSection {
    pub fn robust_config(&self, train: TrainConfig) -> RobustConfig {
        let mut cfg = RobustConfig::new(train, self.attack.attack_config());
        cfg.eval_attacks = self
            .eval_attacks
            .iter()
            .map(|e| NamedAttack {
                name: e.name.clone(),
                kind: e.kind.kind(),
                cfg: e.params.attack_config(),
            })
            .collect();
        cfg.head = self.head.head();
        cfg.oracle_head = self.oracle_head.head();
        cfg.surrogate_batch = self.surrogate_batch;
        cfg
    }
}

#[derive(Debug, Clone, Default, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Also dump the kNN edge list ("src dst dist weight" lines).
    pub graph_dump: bool,
    /// Export format for adversarial batches (csv and, for image data, idx).
    pub export_adversarial: bool,
}

/// Parses and validates a config file; schema errors carry the JSON path.
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<u8>), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut deserializer = serde_json::Deserializer::from_slice(&bytes);
    let config: RunConfig = serde_path_to_error::deserialize(&mut deserializer)
        .map_err(|e| CliError::config(format!("config {}: at /{}: {}", path.display(), e.path(), e.inner())))?;
    if config.version != CONFIG_VERSION {
        return Err(CliError::config(format!(
            "config version {} unsupported (expected {CONFIG_VERSION})",
            config.version
        )));
    }
    referenced_files_exist(&config)?;
    Ok((config, bytes))
}

/// Every file referenced by the config must exist at load time.
fn referenced_files_exist(config: &RunConfig) -> Result<(), CliError> {
    let mut paths: Vec<&PathBuf> = Vec::new();
    if let Some(data) = &config.data {
        for source in std::iter::once(&data.train).chain(data.eval.iter()) {
            match source {
                DataSource::Csv { path, .. } => paths.push(path),
                DataSource::Idx { images, labels } => {
                    paths.push(images);
                    paths.push(labels);
                }
                _ => {}
            }
        }
    }
    if let Some(net) = &config.net {
        if let Some(ckpt) = &net.checkpoint {
            paths.push(ckpt);
        }
    }
    if let Some(robust) = &config.robust {
        if let Some(oracle) = &robust.oracle_checkpoint {
            paths.push(oracle);
        }
    }
    for path in paths {
        if !path.exists() {
            return Err(CliError::config(format!(
                "referenced file does not exist: {}",
                path.display()
            )));
        }
    }
    Ok(())
}

//! Subcommand implementations. Every command is a pure function of
//! (config, input files) and writes its outputs under one directory.

use std::io::Write;
use std::path::Path;

use laplace_net_core::attack::{self, AttackManifest, GradientSource};
use laplace_net_core::data::{
    accuracy, classes_of, save_csv_dataset, save_idx_dataset, split_template, SplitSpec,
    TemplateSet,
};
use laplace_net_core::graph::{knn_approx, knn_exact, KnnGraph};
use laplace_net_core::interpolate::{predict, wnll_interpolate};
use laplace_net_core::matrix::Matrix;
use laplace_net_core::net::DualHeadNet;
use laplace_net_core::pca::pca2d;
use laplace_net_core::robust;
use laplace_net_core::train::{
    self, softmax_regression_predict, train_softmax_regression, Stage, StageId, TrainHooks,
    TrainLog,
};
use laplace_net_core::rng;

use crate::config::{RunConfig, SourceName};
use crate::dataset::{self, Dataset};
use crate::report::Report;
use crate::CliError;

fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    section
        .as_ref()
        .ok_or_else(|| CliError::config(format!("config needs a `{name}` section")))
}

fn build_graph(features: &Matrix, config: &RunConfig, seed: u64) -> Result<KnnGraph, CliError> {
    let graph_section = config.graph.clone().unwrap_or_default();
    let knn = graph_section.knn();
    let graph = match graph_section.approx_probes {
        Some(probes) => knn_approx(features, knn, probes, rng::derive_seed(seed, &[0xa9]))?,
        None => knn_exact(features, knn)?,
    };
    Ok(graph)
}

fn maybe_dump_graph(graph: &KnnGraph, config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    if config.output.graph_dump {
        let path = out_dir.join("graph.txt");
        let file = std::fs::File::create(&path)
            .map_err(|e| CliError::io(format!("creating {}: {e}", path.display())))?;
        graph
            .dump_edges(std::io::BufWriter::new(file))
            .map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn save_dataset(dataset: &Dataset, out_dir: &Path, stem: &str) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    let csv_path = out_dir.join(format!("{stem}.csv"));
    save_csv_dataset(&csv_path, &dataset.features, &dataset.labels)?;
    written.push(csv_path.display().to_string());
    if let Some(dims) = dataset.image_dims {
        let images = out_dir.join(format!("{stem}-images.idx"));
        let labels = out_dir.join(format!("{stem}-labels.idx"));
        save_idx_dataset(&images, &labels, &dataset.features, &dataset.labels, dims)?;
        written.push(images.display().to_string());
        written.push(labels.display().to_string());
    }
    Ok(written)
}

pub fn cmd_gen_data(
    config: &RunConfig,
    config_bytes: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<Report, CliError> {
    let data = require(&config.data, "data")?;
    let dataset = dataset::load(&data.train, seed)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;
    let written = save_dataset(&dataset, out_dir, "data")?;

    let mut report = Report::new("gen-data", config_bytes, seed);
    report.push("rows", dataset.features.rows() as f64);
    report.push("cols", dataset.features.cols() as f64);
    report.push("classes", dataset.labels.cols() as f64);
    report.extra = serde_json::json!({ "files": written });
    Ok(report)
}

/// Raw-feature comparison: interpolating classifier versus a softmax
/// regression trained on the same template.
pub fn cmd_interpolate(
    config: &RunConfig,
    config_bytes: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<Report, CliError> {
    let data = require(&config.data, "data")?;
    let train_section = config.train.clone().unwrap_or_default();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;

    // template and query sets
    let (template, query_features, query_labels) = match &data.eval {
        Some(eval_source) => {
            let template_data = dataset::load(&data.train, seed)?;
            let query_data = dataset::load(eval_source, seed)?;
            if query_data.features.rows() == 0 {
                return Err(CliError::Core(laplace_net_core::Error::usage(
                    "query set is empty",
                )));
            }
            (
                TemplateSet::new(template_data.features, template_data.labels)?,
                query_data.features,
                query_data.labels,
            )
        }
        None => {
            let full = dataset::load(&data.train, seed)?;
            let spec = SplitSpec {
                template_fraction: train_section.template_fraction,
                stratified: true,
                seed: rng::derive_seed(seed, &[0x1e]),
            };
            let split = split_template(&full.features, &full.labels, &spec)?;
            (split.template, split.train_features, split.train_labels)
        }
    };

    // interpolate over queries followed by template rows
    let combined = query_features.vstack(&template.features)?;
    let template_indices: Vec<usize> = (query_features.rows()..combined.rows()).collect();
    let graph = build_graph(&combined, config, seed)?;
    maybe_dump_graph(&graph, config, out_dir)?;
    let knn = config.graph.clone().unwrap_or_default().knn();
    let train_cfg = train_section.train_config(knn, seed);
    let result = wnll_interpolate(&graph, &template, &template_indices, &train_cfg.wnll)?;
    let query_rows: Vec<usize> = (0..query_features.rows()).collect();
    let query_result = result.select_rows(&query_rows);
    let wnll_predictions = predict(&query_result);
    let truth = classes_of(&query_labels);
    let wnll_accuracy = accuracy(&wnll_predictions, &truth);

    // softmax-regression baseline on the template
    let (weights, bias) = train_softmax_regression(
        &template.features,
        &template.labels,
        train_section.baseline_epochs,
        train_cfg.batch_linear,
        train_section.baseline_lr,
        rng::derive_seed(seed, &[0x1f]),
    )?;
    let softmax_predictions = softmax_regression_predict(&weights, &bias, &query_features);
    let softmax_accuracy = accuracy(&softmax_predictions, &truth);

    let scores_path = out_dir.join("scores.csv");
    let file = std::fs::File::create(&scores_path)
        .map_err(|e| CliError::io(format!("creating {}: {e}", scores_path.display())))?;
    query_result
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| CliError::io(format!("writing {}: {e}", scores_path.display())))?;

    let mut report = Report::new("interpolate", config_bytes, seed);
    report.push("wnll_accuracy", wnll_accuracy);
    report.push("softmax_accuracy", softmax_accuracy);
    report.push("template_rows", template.len() as f64);
    report.push("query_rows", query_features.rows() as f64);
    Ok(report)
}

fn build_net(config: &RunConfig, input_dim: usize, classes: usize, seed: u64) -> Result<DualHeadNet, CliError> {
    let net_section = config.net.clone().unwrap_or_default();
    if let Some(ckpt) = &net_section.checkpoint {
        return Ok(DualHeadNet::load(ckpt)?);
    }
    let theta = if net_section.theta_widths.is_empty() {
        // architecture defaults by input width: image-scale or toy-scale
        if input_dim >= 256 {
            vec![256, 128]
        } else {
            vec![64, 32]
        }
    } else {
        net_section.theta_widths.clone()
    };
    Ok(DualHeadNet::new(
        input_dim,
        &theta,
        net_section.buffer_width,
        classes,
        rng::derive_seed(seed, &[0x2a]),
    )?)
}

fn write_train_log(log: &TrainLog, out_dir: &Path) -> Result<(), CliError> {
    let path = out_dir.join("train_log.jsonl");
    let mut file = std::fs::File::create(&path)
        .map_err(|e| CliError::io(format!("creating {}: {e}", path.display())))?;
    for record in log {
        writeln!(
            file,
            "{}",
            serde_json::to_string(record).expect("serializable record")
        )
        .map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn checkpoint_name(id: StageId) -> String {
    let stage = match id.stage {
        Stage::Linear => "linear",
        Stage::Wnll => "wnll",
    };
    format!("checkpoint-p{}-{stage}.ckpt", id.pass)
}

fn export_template(template: &TemplateSet, out_dir: &Path) -> Result<(), CliError> {
    let path = out_dir.join("template.csv");
    save_csv_dataset(&path, &template.features, &template.labels)?;
    Ok(())
}

pub fn cmd_train(
    config: &RunConfig,
    config_bytes: &[u8],
    seed: u64,
    out_dir: &Path,
    adversarial: bool,
) -> Result<Report, CliError> {
    let data = require(&config.data, "data")?;
    let train_section = config.train.clone().unwrap_or_default();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;

    let train_data = dataset::load(&data.train, seed)?;
    let eval_data = data
        .eval
        .as_ref()
        .map(|source| dataset::load(source, seed))
        .transpose()?;

    let knn = config.graph.clone().unwrap_or_default().knn();
    let train_cfg = train_section.train_config(knn, seed);
    let mut net = build_net(config, train_data.features.cols(), train_data.labels.cols(), seed)?;
    if train_section.resume_after.is_some()
        && config.net.as_ref().is_none_or(|n| n.checkpoint.is_none())
    {
        return Err(CliError::config(
            "resume_after requires net.checkpoint to load the interrupted state".into(),
        ));
    }

    let mut log = TrainLog::new();
    let out_dir_buf = out_dir.to_path_buf();
    let mut save_stage = |net: &DualHeadNet, id: StageId| -> laplace_net_core::Result<()> {
        net.save(&out_dir_buf.join(checkpoint_name(id)))
    };
    let hooks = TrainHooks {
        eval: eval_data
            .as_ref()
            .map(|d| (&d.features, &d.labels)),
        resume_after: train_section.resume_after.map(|r| r.stage_id()),
        on_stage: Some(&mut save_stage),
    };

    let split = if adversarial {
        let robust_section = config.robust.clone().unwrap_or_default();
        let robust_cfg = robust_section.robust_config(train_cfg.clone());
        robust_cfg.validate()?;
        robust::pgd_train(
            &mut net,
            &train_data.features,
            &train_data.labels,
            &robust_cfg,
            hooks,
            &mut log,
        )?
    } else {
        train::alternating_train(
            &mut net,
            &train_data.features,
            &train_data.labels,
            &train_cfg,
            hooks,
            &mut log,
        )?
    };

    net.save(&out_dir.join("model.ckpt"))?;
    export_template(&split.template, out_dir)?;
    write_train_log(&log, out_dir)?;

    let mut report = Report::new(if adversarial { "pgd-train" } else { "train" }, config_bytes, seed);
    let (eval_features, eval_labels) = match &eval_data {
        Some(d) => (&d.features, &d.labels),
        None => (&train_data.features, &train_data.labels),
    };
    let truth = classes_of(eval_labels);
    let linear_accuracy = accuracy(&classes_of(&net.logits(eval_features)?), &truth);
    let wnll_predictions = train::test_wnll(&net, eval_features, &split.template, &train_cfg)?;
    let wnll_accuracy = accuracy(&wnll_predictions, &truth);
    report.push("linear_accuracy", linear_accuracy);
    report.push("wnll_accuracy", wnll_accuracy);
    report.push("train_rows", train_data.features.rows() as f64);
    report.extra = serde_json::json!({
        "model": out_dir.join("model.ckpt").display().to_string(),
        "template": out_dir.join("template.csv").display().to_string(),
        "evaluated_on": if eval_data.is_some() { "eval" } else { "train" },
    });
    Ok(report)
}

/// Template set for surrogate gradients / interpolating-head classification:
/// the eval data source (exported `template.csv` from training, typically).
fn load_template(config: &RunConfig, seed: u64) -> Result<Option<TemplateSet>, CliError> {
    let Some(data) = &config.data else {
        return Ok(None);
    };
    let Some(eval_source) = &data.eval else {
        return Ok(None);
    };
    let template_data = dataset::load(eval_source, seed)?;
    Ok(Some(TemplateSet::new(
        template_data.features,
        template_data.labels,
    )?))
}

pub fn cmd_attack(
    config: &RunConfig,
    config_bytes: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<Report, CliError> {
    let data = require(&config.data, "data")?;
    let attack_section = require(&config.attack, "attack")?;
    let net_section = require(&config.net, "net")?;
    let checkpoint = net_section
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("attack needs net.checkpoint".into()))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;

    let net = DualHeadNet::load(checkpoint)?;
    let inputs = dataset::load(&data.train, seed)?;
    let template = load_template(config, seed)?;
    let knn = config.graph.clone().unwrap_or_default().knn();
    let train_cfg = config
        .train
        .clone()
        .unwrap_or_default()
        .train_config(knn, seed);

    let source = match attack_section.source {
        SourceName::LinearHead => GradientSource::LinearHead,
        SourceName::WnllSurrogate => {
            let template = template.as_ref().ok_or_else(|| {
                CliError::config(
                    "wnll-surrogate attacks need data.eval as the template source".into(),
                )
            })?;
            GradientSource::WnllSurrogate {
                template,
                batch: attack_section.batch,
                knn,
                wnll: train_cfg.wnll,
            }
        }
    };
    let cfg = attack_section.params.attack_config();
    let adversarial = match attack_section.kind {
        crate::config::AttackName::Fgsm => {
            attack::fgsm(&net, &inputs.features, &inputs.labels, &cfg, &source)?
        }
        crate::config::AttackName::Ifgsm => {
            attack::ifgsm(&net, &inputs.features, &inputs.labels, &cfg, &source)?
        }
        crate::config::AttackName::CwL2 => {
            attack::cw_l2(&net, &inputs.features, &inputs.labels, &cfg, &source)?
        }
    };

    // accuracy under the linear head, plus the interpolating head when a
    // template is available
    let truth = classes_of(&inputs.labels);
    let mut report = Report::new("attack", config_bytes, seed);
    let clean_linear = accuracy(&classes_of(&net.logits(&inputs.features)?), &truth);
    let adv_linear = accuracy(&classes_of(&net.logits(&adversarial)?), &truth);
    report.push("clean_linear_accuracy", clean_linear);
    report.push("adversarial_linear_accuracy", adv_linear);
    if let Some(template) = &template {
        let clean = train::test_wnll(&net, &inputs.features, template, &train_cfg)?;
        let adv = train::test_wnll(&net, &adversarial, template, &train_cfg)?;
        report.push("clean_wnll_accuracy", accuracy(&clean, &truth));
        report.push("adversarial_wnll_accuracy", accuracy(&adv, &truth));
    }

    if config.output.export_adversarial {
        let adv_dataset = Dataset {
            features: adversarial,
            labels: inputs.labels.clone(),
            image_dims: inputs.image_dims,
        };
        let files = save_dataset(&adv_dataset, out_dir, "adversarial")?;
        let manifest = AttackManifest {
            attack: attack_section.kind.as_str().to_string(),
            epsilon: cfg.epsilon,
            alpha: cfg.alpha,
            steps: cfg.steps,
            seed,
            source: match attack_section.source {
                SourceName::LinearHead => "linear-head".into(),
                SourceName::WnllSurrogate => "wnll-surrogate".into(),
            },
        };
        let manifest_path = out_dir.join("adversarial-manifest.json");
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).expect("serializable"),
        )
        .map_err(|e| CliError::io(format!("writing {}: {e}", manifest_path.display())))?;
        report.extra = serde_json::json!({ "files": files });
    }
    Ok(report)
}

pub fn cmd_eval(
    config: &RunConfig,
    config_bytes: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<Report, CliError> {
    let data = require(&config.data, "data")?;
    let net_section = require(&config.net, "net")?;
    let robust_section = config.robust.clone().unwrap_or_default();
    let checkpoint = net_section
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("eval needs net.checkpoint".into()))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;

    let net = DualHeadNet::load(checkpoint)?;
    let test = dataset::load(&data.train, seed)?;
    let template = load_template(config, seed)?.ok_or_else(|| {
        CliError::config("eval needs data.eval as the template source".into())
    })?;

    let knn = config.graph.clone().unwrap_or_default().knn();
    let train_cfg = config
        .train
        .clone()
        .unwrap_or_default()
        .train_config(knn, seed);
    let robust_cfg = robust_section.robust_config(train_cfg);

    let oracle = robust_section
        .oracle_checkpoint
        .as_ref()
        .map(|p| DualHeadNet::load(p))
        .transpose()?;

    let result = robust::evaluate(
        &net,
        &test.features,
        &test.labels,
        &template,
        &robust_cfg,
        oracle.as_ref(),
    )?;

    let mut report = Report::new("eval", config_bytes, seed);
    report.push("natural_accuracy", result.natural_accuracy);
    for (name, value) in &result.robust_accuracy {
        report.push(&format!("robust_accuracy_{name}"), *value);
    }
    report.extra = serde_json::to_value(&result).expect("serializable report");

    let robust_path = out_dir.join("robust_report.json");
    std::fs::write(
        &robust_path,
        serde_json::to_string_pretty(&result).expect("serializable"),
    )
    .map_err(|e| CliError::io(format!("writing {}: {e}", robust_path.display())))?;
    Ok(report)
}

pub fn cmd_pca2d(
    config: &RunConfig,
    config_bytes: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<Report, CliError> {
    let data = require(&config.data, "data")?;
    let net_section = require(&config.net, "net")?;
    let checkpoint = net_section
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("pca2d needs net.checkpoint".into()))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;

    let net = DualHeadNet::load(checkpoint)?;
    let inputs = dataset::load(&data.train, seed)?;
    let buffered = net.buffered_features(&inputs.features)?;
    let pca = pca2d(&buffered, 1e-10, 100_000)?;
    let projected = pca.project(&buffered);

    let truth = classes_of(&inputs.labels);
    let path = out_dir.join("pca2d.csv");
    let mut csv = String::from("pc1,pc2,true_class\n");
    for (i, &class) in truth.iter().enumerate() {
        csv.push_str(&format!("{},{},{class}\n", projected[(i, 0)], projected[(i, 1)]));
    }
    std::fs::write(&path, csv)
        .map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))?;

    let mut report = Report::new("pca2d", config_bytes, seed);
    report.push("explained_variance_1", pca.explained_variance[0]);
    report.push("explained_variance_2", pca.explained_variance[1]);
    report.push("rows", projected.rows() as f64);
    Ok(report)
}

/// Shared dispatch so tests can call commands without spawning a process.
pub fn run_command(
    command: &str,
    config: &RunConfig,
    config_bytes: &[u8],
    out_dir: &Path,
) -> Result<Report, CliError> {
    let seed = match std::env::var("LAPLACE_NET_SEED") {
        Ok(value) => value
            .parse::<u64>()
            .map_err(|_| CliError::config(format!("LAPLACE_NET_SEED must be a u64, got {value}")))?,
        Err(_) => config.seed,
    };
    match command {
        "gen-data" => cmd_gen_data(config, config_bytes, seed, out_dir),
        "interpolate" => cmd_interpolate(config, config_bytes, seed, out_dir),
        "train" => cmd_train(config, config_bytes, seed, out_dir, false),
        "pgd-train" => cmd_train(config, config_bytes, seed, out_dir, true),
        "attack" => cmd_attack(config, config_bytes, seed, out_dir),
        "eval" => cmd_eval(config, config_bytes, seed, out_dir),
        "pca2d" => cmd_pca2d(config, config_bytes, seed, out_dir),
        other => Err(CliError::config(format!("unknown command {other}"))),
    }
}

//! Run reports: a JSON summary with config hash and timestamps, plus a
//! deterministic metrics CSV (no timestamps, so identical configs produce
//! bitwise-identical metric files).

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::CliError;

pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    /// Ordered (metric, value) pairs; insertion order is the CSV row order.
    pub metrics: Vec<(String, f64)>,
    /// Extra structured payload merged into report.json.
    pub extra: serde_json::Value,
}

impl Report {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Report {
        let mut hasher = Sha256::new();
        hasher.update(config_bytes);
        Report {
            command: command.to_string(),
            config_hash: format!("{:x}", hasher.finalize()),
            seed,
            started_at: chrono::Utc::now().to_rfc3339(),
            metrics: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, metric: &str, value: f64) {
        self.metrics.push((metric.to_string(), value));
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::io(format!("creating {}: {e}", out_dir.display())))?;

        let metrics_path = out_dir.join("metrics.csv");
        let mut csv = String::from("metric,value\n");
        for (name, value) in &self.metrics {
            csv.push_str(&format!("{name},{value}\n"));
        }
        std::fs::write(&metrics_path, csv)
            .map_err(|e| CliError::io(format!("writing {}: {e}", metrics_path.display())))?;

        let report_path = out_dir.join("report.json");
        let json = serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "library_version": env!("CARGO_PKG_VERSION"),
            "started_at": self.started_at,
            "finished_at": chrono::Utc::now().to_rfc3339(),
            "metrics": self.metrics.iter().cloned().collect::<std::collections::BTreeMap<String, f64>>(),
            "details": self.extra,
        });
        let mut file = std::fs::File::create(&report_path)
            .map_err(|e| CliError::io(format!("creating {}: {e}", report_path.display())))?;
        writeln!(file, "{}", serde_json::to_string_pretty(&json).expect("serializable"))
            .map_err(|e| CliError::io(format!("writing {}: {e}", report_path.display())))?;
        Ok(())
    }
}

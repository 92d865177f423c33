//! Standalone environment inference on a saved model and dataset.

use std::fs;
use std::path::Path;

use reiil_core::data::read_dataset;
use reiil_core::envinfer::{majority_split, partition_csv, EiConfig};
use reiil_core::metrics::{conjecture_gap, mi_diagnostics, MiDiagnostics};
use reiil_core::models::read_checkpoint;
use reiil_core::pipelines::run_ei_step;
use reiil_core::RngSeed;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EiSummary {
    pub objective: f64,
    pub env_sizes: [usize; 2],
    pub pool_mi: Option<MiDiagnostics>,
    pub majority_conjecture_gap: Option<f64>,
    pub minority_shuffled_fraction: Option<f64>,
}

pub fn cmd_ei(model: &Path, data: &Path, cfg: &EiConfig, seed: u64, out: &Path) -> anyhow::Result<EiSummary> {
    let m = read_checkpoint(std::io::BufReader::new(fs::File::open(model)?))?;
    let d = read_dataset(std::io::BufReader::new(fs::File::open(data)?))?;
    let r = run_ei_step(&m, &d, cfg, RngSeed(seed))?;
    let (n0, n1) = r.partition.sizes();
    let split = majority_split(&d, &r.partition).ok();
    let summary = EiSummary {
        objective: r.final_objective,
        env_sizes: [n0, n1],
        pool_mi: mi_diagnostics(&d).ok(),
        majority_conjecture_gap: split.as_ref().and_then(|s| conjecture_gap(&d, &s.majority).ok()),
        minority_shuffled_fraction: split.as_ref().and_then(|s| {
            let v = s.minority.meta().is_shuffled.as_ref()?;
            Some(v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
        }),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("partition.csv"), partition_csv(&r.partition, Some(&d)))?;
    fs::write(out.join("ei.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

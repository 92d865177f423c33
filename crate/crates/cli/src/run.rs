//! Running methods over generated data.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use reiil_core::envinfer::partition_csv;
use reiil_core::metrics::{causal_errors, evaluate, EnvError};
use reiil_core::models::write_checkpoint;
use reiil_core::pipelines::{run_method, LambdaScore, Method, MethodConfig, MethodOutcome, Splits, StopReason};
use reiil_core::{Dataset, Model, RngSeed};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::gen::{read_manifest, read_seed, seed_dir, SeedData};
use crate::stats::{summarize, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Environment inference stopped before producing a partition.
    Degenerate,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub ei_objective: f64,
    pub majority_size: usize,
    pub minority_size: usize,
    pub reference_pool_accuracy: Option<f64>,
    pub minority_accuracy: Option<f64>,
    pub minority_shuffled_fraction: Option<f64>,
    pub conjecture_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub variant: String,
    pub dataset: DatasetSpec,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub lambda: Option<f64>,
    /// `train_error`, `val_error`, `test_error`, `test_accuracy`, `ce`, `nce`
    /// where applicable.
    pub metrics: BTreeMap<String, f64>,
    pub test_per_env: Vec<EnvError>,
    pub lambda_sweep: Vec<LambdaScore>,
    pub stop: Option<StopReason>,
    pub iterations: Vec<IterationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub status: RunStatus,
    pub metrics: BTreeMap<String, f64>,
}

/// Per-method roll-up written next to the per-seed directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub variant: String,
    pub seeds: Vec<SeedRow>,
    pub summary: BTreeMap<String, Summary>,
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    runs_dir(out).join(method.name()).join(format!("seed-{seed}"))
}

fn splits_of(data: &SeedData) -> Splits {
    Splits {
        train: data.train.clone(),
        val: data.val.clone(),
        test: data.test.clone(),
    }
}

fn metrics_of(outcome: &MethodOutcome, data: &SeedData) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: Option<f64>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    put("train_error", outcome.train_error);
    put("val_error", outcome.val_error);
    put("test_error", outcome.test_error);
    if data.test.task().is_classification() {
        put("test_accuracy", outcome.test_error.map(|e| 1.0 - e));
    }
    if let (Some(Model::Linear(l)), Some(truth)) = (&outcome.model, &data.truth) {
        let r = causal_errors(l, truth)?;
        put("ce", Some(r.ce));
        put("nce", r.nce);
    }
    Ok(m)
}

fn execute(
    method: Method,
    seed: u64,
    data: &SeedData,
    cfg: &MethodConfig,
    dataset: &DatasetSpec,
    dir: &Path,
) -> anyhow::Result<RunResult> {
    let outcome = run_method(method, &splits_of(data), cfg, RngSeed(seed))?;
    let mut result = RunResult {
        method,
        seed,
        variant: dataset.variant_label(),
        dataset: dataset.clone(),
        status: if outcome.model.is_some() { RunStatus::Ok } else { RunStatus::Degenerate },
        message: None,
        lambda: outcome.lambda,
        metrics: metrics_of(&outcome, data)?,
        test_per_env: Vec::new(),
        lambda_sweep: Vec::new(),
        stop: None,
        iterations: Vec::new(),
    };
    fs::create_dir_all(dir)?;
    if let Some(model) = &outcome.model {
        result.test_per_env = evaluate(model, &data.test)?.per_env;
        write_checkpoint(model, BufWriter::new(fs::File::create(dir.join("model.ckpt"))?))?;
    }
    if let Some(trace) = &outcome.trace {
        result.stop = Some(trace.stop);
        result.lambda_sweep = trace.lambda_sweep.clone();
        result.iterations = trace
            .iterations
            .iter()
            .map(|r| IterationRow {
                iteration: r.iteration,
                ei_objective: r.ei_objective,
                majority_size: r.majority_size,
                minority_size: r.minority_size,
                reference_pool_accuracy: r.reference_pool_accuracy,
                minority_accuracy: r.minority_accuracy,
                minority_shuffled_fraction: r.minority_shuffled_fraction,
                conjecture_gap: r.conjecture_gap,
            })
            .collect();
        fs::write(dir.join("trace.csv"), trace.to_csv())?;
        if let Some(p) = &trace.final_partition {
            let refs: Vec<&Dataset> = data.train.iter().collect();
            let pool = Dataset::concat(&refs)?;
            fs::write(dir.join("partition.csv"), partition_csv(p, Some(&pool)))?;
        }
    }
    Ok(result)
}

fn write_result(dir: &Path, r: &RunResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(r)?)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub results: Vec<RunResult>,
    pub summaries: Vec<MethodSummary>,
}

impl RunReport {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| r.status == RunStatus::Error).count()
    }

    pub fn get(&self, method: Method, seed: u64) -> Option<&RunResult> {
        self.results.iter().find(|r| r.method == method && r.seed == seed)
    }
}

/// Runs every configured method on every seed. Jobs are independent and
/// write to disjoint directories, so they run on the current rayon pool.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunReport> {
    let manifest = read_manifest(out)?;
    if manifest.dataset != cfg.dataset {
        anyhow::bail!("data in {} was generated from a different dataset spec; rerun `gen`", out.display());
    }
    let methods = cfg.methods()?;
    let mcfg = cfg.method_config();
    let data: BTreeMap<u64, Arc<SeedData>> = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, Arc::new(read_seed(&seed_dir(out, s))?))))
        .collect::<anyhow::Result<_>>()?;
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let dir = run_dir(out, method, seed);
            let r = execute(method, seed, &data[&seed], &mcfg, &cfg.dataset, &dir).unwrap_or_else(|e| RunResult {
                method,
                seed,
                variant: cfg.dataset.variant_label(),
                dataset: cfg.dataset.clone(),
                status: RunStatus::Error,
                message: Some(format!("{e:#}")),
                lambda: None,
                metrics: BTreeMap::new(),
                test_per_env: Vec::new(),
                lambda_sweep: Vec::new(),
                stop: None,
                iterations: Vec::new(),
            });
            write_result(&dir, &r).map(|_| r)
        })
        .collect::<anyhow::Result<_>>()?;
    let summaries = methods
        .iter()
        .map(|&m| {
            let rows: Vec<&RunResult> = results.iter().filter(|r| r.method == m).collect();
            let s = MethodSummary {
                method: m,
                variant: cfg.dataset.variant_label(),
                seeds: rows
                    .iter()
                    .map(|r| SeedRow {
                        seed: r.seed,
                        status: r.status,
                        metrics: r.metrics.clone(),
                    })
                    .collect(),
                summary: summarize_metrics(rows.iter().map(|r| &r.metrics)),
            };
            let p = runs_dir(out).join(m.name()).join("results.json");
            fs::write(p, serde_json::to_string_pretty(&s)?)?;
            Ok(s)
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(RunReport { results, summaries })
}

pub fn summarize_metrics<'a>(rows: impl Iterator<Item = &'a BTreeMap<String, f64>>) -> BTreeMap<String, Summary> {
    let mut by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in rows {
        for (k, v) in m {
            by_key.entry(k.clone()).or_default().push(*v);
        }
    }
    by_key.into_iter().map(|(k, v)| (k, summarize(&v))).collect()
}

//! Aggregation of finished runs into table and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use reiil_core::pipelines::Method;

use crate::config::DatasetSpec;
use crate::run::{runs_dir, RunResult, RunStatus};
use crate::stats::{summarize, Summary};

/// Metric rows of the table, in display order.
pub const TABLE_METRICS: [&str; 6] = ["train_error", "val_error", "test_error", "test_accuracy", "ce", "nce"];

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub variant: String,
    pub method: Method,
    pub metric: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsAggregate {
    pub variant: String,
    pub method: Method,
    pub iteration: usize,
    pub minority_accuracy: Summary,
    pub minority_shuffled_fraction: Summary,
    pub conjecture_gap: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub aggregate: Vec<AggregateRow>,
    pub dynamics: Vec<DynamicsAggregate>,
}

/// Every `runs/<method>/seed-<s>/results.json` below the given experiment roots.
pub fn collect_results(roots: &[PathBuf]) -> anyhow::Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for root in roots {
        let runs = runs_dir(root);
        let mut method_dirs: Vec<PathBuf> = fs::read_dir(&runs)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", runs.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        method_dirs.sort();
        for m in method_dirs {
            let mut seeds: Vec<PathBuf> = fs::read_dir(&m)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("results.json").is_file())
                .collect();
            seeds.sort();
            for s in seeds {
                let p = s.join("results.json");
                let text = fs::read_to_string(&p)?;
                out.push(serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?);
            }
        }
    }
    if out.is_empty() {
        anyhow::bail!("no completed runs found");
    }
    Ok(out)
}

pub fn aggregate(results: &[RunResult]) -> anyhow::Result<Report> {
    let mut specs: BTreeMap<&str, &DatasetSpec> = BTreeMap::new();
    let mut seen = BTreeMap::new();
    for r in results {
        if let Some(prev) = specs.insert(&r.variant, &r.dataset) {
            if prev != &r.dataset {
                anyhow::bail!(
                    "incompatible runs: variant `{}` appears with different dataset settings",
                    r.variant
                );
            }
        }
        if seen.insert((&r.variant, r.method, r.seed), ()).is_some() {
            anyhow::bail!(
                "incompatible runs: `{}` seed {} of `{}` appears twice",
                r.method,
                r.seed,
                r.variant
            );
        }
    }
    let ok: Vec<&RunResult> = results.iter().filter(|r| r.status == RunStatus::Ok).collect();
    if ok.is_empty() {
        anyhow::bail!("no successful runs to aggregate");
    }

    let mut values: BTreeMap<(String, Method, String), Vec<f64>> = BTreeMap::new();
    let mut dyn_values: BTreeMap<(String, Method, usize), [Vec<f64>; 3]> = BTreeMap::new();
    for r in &ok {
        for (k, v) in &r.metrics {
            values.entry((r.variant.clone(), r.method, k.clone())).or_default().push(*v);
        }
        for it in &r.iterations {
            let slot = dyn_values.entry((r.variant.clone(), r.method, it.iteration)).or_default();
            for (i, v) in [it.minority_accuracy, it.minority_shuffled_fraction, it.conjecture_gap]
                .into_iter()
                .enumerate()
            {
                if let Some(v) = v {
                    slot[i].push(v);
                }
            }
        }
    }
    let aggregate = values
        .into_iter()
        .map(|((variant, method, metric), v)| AggregateRow {
            variant,
            method,
            metric,
            summary: summarize(&v),
        })
        .collect();
    let dynamics = dyn_values
        .into_iter()
        .map(|((variant, method, iteration), [a, s, g])| DynamicsAggregate {
            variant,
            method,
            iteration,
            minority_accuracy: summarize(&a),
            minority_shuffled_fraction: summarize(&s),
            conjecture_gap: summarize(&g),
        })
        .collect();
    Ok(Report { aggregate, dynamics })
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

impl Report {
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("variant,method,metric,n,mean,std\n");
        for r in &self.aggregate {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant,
                r.method,
                r.metric,
                r.summary.n,
                num(r.summary.mean),
                num(r.summary.std)
            );
        }
        s
    }

    /// Methods × metrics down, variants across; cells are `mean (std)` at two decimals.
    pub fn table1_csv(&self) -> String {
        let variants: Vec<&str> = {
            let mut v: Vec<&str> = self.aggregate.iter().map(|r| r.variant.as_str()).collect();
            v.sort();
            v.dedup();
            v
        };
        let mut cells: BTreeMap<(Method, &str, &str), &Summary> = BTreeMap::new();
        for r in &self.aggregate {
            cells.insert((r.method, r.metric.as_str(), r.variant.as_str()), &r.summary);
        }
        let mut s = String::from("method,metric");
        for v in &variants {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
        let methods: Vec<Method> = {
            let mut m: Vec<Method> = self.aggregate.iter().map(|r| r.method).collect();
            m.sort();
            m.dedup();
            m
        };
        for m in methods {
            for metric in TABLE_METRICS {
                if !variants.iter().any(|v| cells.contains_key(&(m, metric, v))) {
                    continue;
                }
                let _ = write!(s, "{m},{metric}");
                for v in &variants {
                    match cells.get(&(m, metric, v)) {
                        Some(c) => {
                            let _ = write!(s, ",{:.2} ({:.2})", c.mean, c.std);
                        }
                        None => s.push(','),
                    }
                }
                s.push('\n');
            }
        }
        s
    }

    /// Test accuracy bars per method, classification runs only.
    pub fn fig3_csv(&self) -> String {
        let mut s = String::from("variant,method,n,test_accuracy_mean,test_accuracy_std\n");
        for r in self.aggregate.iter().filter(|r| r.metric == "test_accuracy") {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.variant,
                r.method,
                r.summary.n,
                num(r.summary.mean),
                num(r.summary.std)
            );
        }
        s
    }

    /// One row per iteration per method.
    pub fn fig4_csv(&self) -> String {
        let mut s = String::from(
            "variant,method,iteration,n,minority_accuracy_mean,minority_accuracy_std,\
             minority_shuffled_fraction_mean,minority_shuffled_fraction_std,conjecture_gap_mean,conjecture_gap_std\n",
        );
        for d in &self.dynamics {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                d.variant,
                d.method,
                d.iteration,
                d.minority_accuracy.n.max(d.minority_shuffled_fraction.n).max(d.conjecture_gap.n),
                num(d.minority_accuracy.mean),
                num(d.minority_accuracy.std),
                num(d.minority_shuffled_fraction.mean),
                num(d.minority_shuffled_fraction.std),
                num(d.conjecture_gap.mean),
                num(d.conjecture_gap.std),
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("aggregate.csv"), self.aggregate_csv())?;
        fs::write(dir.join("table1.csv"), self.table1_csv())?;
        fs::write(dir.join("fig3.csv"), self.fig3_csv())?;
        fs::write(dir.join("fig4.csv"), self.fig4_csv())?;
        Ok(())
    }
}

pub fn cmd_report(roots: &[PathBuf], out: &Path) -> anyhow::Result<Report> {
    let results = collect_results(roots)?;
    let report = aggregate(&results)?;
    report.write(out)?;
    Ok(report)
}

//! Dataset generation and the on-disk data layout.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use reiil_core::data::{read_dataset, write_dataset};
use reiil_core::datagen::{
    gen_cbmnist, gen_color_spurious, gen_proxy_cbmnist, gen_sem_protocol, BackgroundSpec, ClassMapping, ColorBase,
    SemGroundTruth,
};
use reiil_core::ingest::{load_cifar10, load_mnist, pick_backgrounds};
use reiil_core::metrics::{mi_diagnostics, MiDiagnostics};
use reiil_core::{Dataset, Labels, RngSeed};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig};

pub const DATA_EXT: &str = "rds";

/// Splits of one seed, as generated or as read back from disk.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Vec<Dataset>,
    pub val: Option<Dataset>,
    pub test: Dataset,
    pub truth: Option<SemGroundTruth>,
    pub mapping: Option<ClassMapping>,
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    data_dir(out).join(format!("seed-{seed}"))
}

pub fn generate(spec: &DatasetSpec, seed: u64) -> anyhow::Result<SeedData> {
    let seed = RngSeed(seed);
    Ok(match spec {
        DatasetSpec::Sem {
            variant,
            dim,
            n_per_env,
            protocol,
        } => {
            let s = gen_sem_protocol(*variant, *dim, *n_per_env, protocol, seed)?;
            SeedData {
                train: s.train,
                val: Some(s.val),
                test: s.test,
                truth: Some(s.truth),
                mapping: None,
            }
        }
        DatasetSpec::ProxyCbmnist { spec } => {
            let b = gen_proxy_cbmnist(spec, seed)?;
            SeedData {
                train: vec![b.env1, b.env2],
                val: None,
                test: b.test,
                truth: None,
                mapping: Some(b.mapping),
            }
        }
        DatasetSpec::Cbmnist {
            variant,
            mnist_images,
            mnist_labels,
            cifar,
            params,
        } => {
            let digits = load_mnist(mnist_images, mnist_labels)?;
            let records = load_cifar10(cifar)?;
            let backgrounds = pick_backgrounds(&records, seed.derive("backgrounds"))?;
            let mapping = ClassMapping::random(10, *variant, &mut seed.derive("mapping").rng())?;
            let bg = BackgroundSpec { backgrounds, mapping };
            let b = gen_cbmnist(*variant, &digits, &bg, params, seed)?;
            SeedData {
                train: vec![b.env1, b.env2],
                val: None,
                test: b.test,
                truth: None,
                mapping: Some(b.mapping),
            }
        }
        DatasetSpec::ColorMnist {
            mnist_images,
            mnist_labels,
            params,
        } => {
            let digits = load_mnist(mnist_images, mnist_labels)?;
            let b = gen_color_spurious(ColorBase::Images(&digits), params, seed)?;
            SeedData {
                train: b.train,
                val: None,
                test: b.test,
                truth: None,
                mapping: None,
            }
        }
        DatasetSpec::ColorProxy { spec, params } => {
            let b = gen_color_spurious(ColorBase::Proxy(spec), params, seed)?;
            SeedData {
                train: b.train,
                val: None,
                test: b.test,
                truth: None,
                mapping: None,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub file: String,
    pub rows: usize,
    pub dim: usize,
    /// Class frequencies, classification only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_balance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffled_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi: Option<MiDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    pub splits: Vec<SplitStats>,
    /// Statistics of all training environments pooled.
    pub train_pool: SplitStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub variant: String,
    pub dataset: DatasetSpec,
    pub created_unix_secs: u64,
    pub seeds: Vec<SeedManifest>,
}

pub fn split_stats(name: &str, file: &str, d: &Dataset) -> SplitStats {
    let (class_balance, label_mean) = match d.labels() {
        Labels::Class(y) => {
            let k = d.task().output_dim().max(2);
            let mut counts = vec![0usize; k];
            y.iter().for_each(|&c| counts[c as usize] += 1);
            (Some(counts.iter().map(|&c| c as f64 / y.len() as f64).collect()), None)
        }
        Labels::Real(y) => (None, Some(y.iter().sum::<f64>() / y.len() as f64)),
    };
    let shuffled_fraction = d
        .meta()
        .is_shuffled
        .as_ref()
        .map(|s| s.iter().filter(|&&b| b).count() as f64 / s.len() as f64);
    SplitStats {
        split: name.into(),
        file: file.into(),
        rows: d.len(),
        dim: d.dim(),
        class_balance,
        label_mean,
        shuffled_fraction,
        mi: mi_diagnostics(d).ok(),
    }
}

fn split_names(data: &SeedData) -> Vec<(String, &Dataset)> {
    let mut v: Vec<(String, &Dataset)> = data
        .train
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("train-{i}"), d))
        .collect();
    if let Some(val) = &data.val {
        v.push(("val".into(), val));
    }
    v.push(("test".into(), &data.test));
    v
}

pub fn write_seed(dir: &Path, seed: u64, data: &SeedData) -> anyhow::Result<SeedManifest> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for (name, d) in split_names(data) {
        let file = format!("{name}.{DATA_EXT}");
        write_dataset(d, BufWriter::new(fs::File::create(dir.join(&file))?))?;
        splits.push(split_stats(&name, &file, d));
    }
    if let Some(t) = &data.truth {
        fs::write(dir.join("truth.json"), serde_json::to_string_pretty(t)?)?;
    }
    if let Some(m) = &data.mapping {
        fs::write(dir.join("mapping.json"), serde_json::to_string_pretty(m)?)?;
    }
    let refs: Vec<&Dataset> = data.train.iter().collect();
    let pool = Dataset::concat(&refs)?;
    Ok(SeedManifest {
        seed,
        splits,
        train_pool: split_stats("train", "", &pool),
    })
}

pub fn read_seed(dir: &Path) -> anyhow::Result<SeedData> {
    let open = |name: &str| -> anyhow::Result<Dataset> {
        let p = dir.join(format!("{name}.{DATA_EXT}"));
        let f = fs::File::open(&p).map_err(|e| anyhow::anyhow!("cannot open {}: {e} (run `gen` first)", p.display()))?;
        Ok(read_dataset(std::io::BufReader::new(f))?)
    };
    let mut train = Vec::new();
    while dir.join(format!("train-{}.{DATA_EXT}", train.len())).exists() {
        train.push(open(&format!("train-{}", train.len()))?);
    }
    if train.is_empty() {
        anyhow::bail!("no training environments in {} (run `gen` first)", dir.display());
    }
    let val = if dir.join(format!("val.{DATA_EXT}")).exists() {
        Some(open("val")?)
    } else {
        None
    };
    let json = |name: &str| -> anyhow::Result<Option<String>> {
        let p = dir.join(name);
        Ok(if p.exists() { Some(fs::read_to_string(p)?) } else { None })
    };
    Ok(SeedData {
        train,
        val,
        test: open("test")?,
        truth: json("truth.json")?.map(|s| serde_json::from_str(&s)).transpose()?,
        mapping: json("mapping.json")?.map(|s| serde_json::from_str(&s)).transpose()?,
    })
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Manifest> {
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let data = generate(&cfg.dataset, s)?;
            write_seed(&seed_dir(out, s), s, &data)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = Manifest {
        generator_version: env!("CARGO_PKG_VERSION").into(),
        variant: cfg.dataset.variant_label(),
        dataset: cfg.dataset.clone(),
        created_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seeds,
    };
    fs::write(data_dir(out).join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(out: &Path) -> anyhow::Result<Manifest> {
    let p = data_dir(out).join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| anyhow::anyhow!("cannot read {}: {e} (run `gen` first)", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

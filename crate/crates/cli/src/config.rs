//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use reiil_core::datagen::{CbVariant, CbmnistConfig, ColorParams, ColorProxySpec, ProxySpec, SemProtocol, SemVariant};
use reiil_core::envinfer::EiConfig;
use reiil_core::pipelines::{IrmSpec, Method, MethodConfig, ReiilConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable overriding the configured output root.
pub const OUT_ENV: &str = "REIL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub pipeline: PipelineSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_sem_dim() -> usize {
    10
}

fn default_sem_n() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sem {
        variant: SemVariant,
        #[serde(default = "default_sem_dim")]
        dim: usize,
        #[serde(default = "default_sem_n")]
        n_per_env: usize,
        #[serde(default)]
        protocol: SemProtocol,
    },
    ProxyCbmnist {
        #[serde(default)]
        spec: ProxySpec,
    },
    Cbmnist {
        variant: CbVariant,
        mnist_images: PathBuf,
        mnist_labels: PathBuf,
        cifar: Vec<PathBuf>,
        #[serde(default)]
        params: CbmnistConfig,
    },
    ColorMnist {
        mnist_images: PathBuf,
        mnist_labels: PathBuf,
        #[serde(default)]
        params: ColorParams,
    },
    ColorProxy {
        #[serde(default)]
        spec: ColorProxySpec,
        #[serde(default)]
        params: ColorParams,
    },
}

impl DatasetSpec {
    /// Short label used to group runs in reports, e.g. `sem-FOU`.
    pub fn variant_label(&self) -> String {
        match self {
            DatasetSpec::Sem { variant, .. } => format!("sem-{variant}"),
            DatasetSpec::ProxyCbmnist { spec } => format!("proxy_cbmnist-{:?}", spec.variant),
            DatasetSpec::Cbmnist { variant, .. } => format!("cbmnist-{variant:?}"),
            DatasetSpec::ColorMnist { .. } => "color_mnist".into(),
            DatasetSpec::ColorProxy { .. } => "color_proxy".into(),
        }
    }

    pub fn has_validation(&self) -> bool {
        matches!(self, DatasetSpec::Sem { .. })
    }
}

fn default_methods() -> Vec<String> {
    vec!["erm".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub n_iters: Option<usize>,
    #[serde(default)]
    pub irm: IrmSpec,
    #[serde(default)]
    pub ei: EiConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.to_owned(),
                source,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        let methods = self.methods()?;
        if methods.is_empty() {
            return bad("`pipeline.methods` is empty".into());
        }
        if self.pipeline.n_iters == Some(0) {
            return bad("`pipeline.n_iters` must be at least 1".into());
        }
        let uses_irm = methods
            .iter()
            .any(|m| matches!(m, Method::Irm | Method::IrmRegrouped | Method::Eiil | Method::Reiil));
        if uses_irm && self.pipeline.irm.lambdas.len() > 1 && !self.dataset.has_validation() {
            return bad("`pipeline.irm.lambdas` lists a sweep but the dataset has no validation split".into());
        }
        if methods.contains(&Method::IrmRegrouped) && matches!(self.dataset, DatasetSpec::Sem { .. }) {
            return bad("method `irm_regrouped` needs a dataset with shuffled samples".into());
        }
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Method>, ConfigError> {
        self.pipeline
            .methods
            .iter()
            .map(|m| m.parse().map_err(|e: reiil_core::Error| ConfigError::Invalid(format!("pipeline.methods: {e}"))))
            .collect()
    }

    pub fn method_config(&self) -> MethodConfig {
        let defaults = ReiilConfig::default();
        MethodConfig {
            train: self.train.clone(),
            irm: self.pipeline.irm.clone(),
            reiil: ReiilConfig {
                n_iters: self.pipeline.n_iters.unwrap_or(defaults.n_iters),
                ei: self.pipeline.ei.clone(),
                ..defaults
            },
        }
    }

    /// `--out` flag, then `REIL_OUT`, then the config's `out`, then `./out`.
    pub fn resolve_out(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Parses `0,1,2` or `0-4`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, ConfigError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || ConfigError::Invalid(format!("bad seed `{part}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(ConfigError::Invalid("seed list is empty".into()));
    }
    Ok(out)
}

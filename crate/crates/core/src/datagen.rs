//! Synthetic benchmarks.
//!
//! * linear SEM regression (`X → Y → Z`) in eight variants: fully or
//!   partially observed, homo- or heteroskedastic, raw or scrambled;
//! * colour-spurious binary classification (CMNIST-style), on images or on a
//!   Gaussian-cluster stand-in;
//! * digits composited onto class-mapped backgrounds (CBMNIST I/II/III);
//! * a download-free background benchmark with the same causal graph, where
//!   both the digit and the background are Gaussian clusters;
//! * regrouping of shuffled samples into their own environment.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{split_by_partition, Dataset, EnvPartition, Labels, Meta, PartitionSplit, Task};
use crate::error::{Error, Result};
use crate::ingest::CIFAR_PIXELS;
use crate::rng::{Rng, RngSeed};

// ---------------------------------------------------------------------------
// Linear SEM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SemVariant {
    /// `P`: a hidden scalar confounder is added to every coordinate of X and Z.
    pub partially_observed: bool,
    /// `E`: target noise is unit, anti-causal noise scales with the environment.
    pub heteroskedastic: bool,
    /// `S`: features are an orthogonal mix of `[X; Z]`.
    pub scrambled: bool,
}

impl SemVariant {
    pub const ALL: [&'static str; 8] = ["FOU", "FOS", "FEU", "FES", "POU", "POS", "PEU", "PES"];
}

impl FromStr for SemVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        let bad = || Error::InvalidSpec(format!("unknown SEM variant `{s}` (expected e.g. FOU, PES)"));
        if b.len() != 3 {
            return Err(bad());
        }
        let pick = |c: u8, no: u8, yes: u8| match c {
            c if c == no => Ok(false),
            c if c == yes => Ok(true),
            _ => Err(bad()),
        };
        Ok(SemVariant {
            partially_observed: pick(b[0], b'F', b'P')?,
            heteroskedastic: pick(b[1], b'O', b'E')?,
            scrambled: pick(b[2], b'U', b'S')?,
        })
    }
}

impl fmt::Display for SemVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.partially_observed { 'P' } else { 'F' },
            if self.heteroskedastic { 'E' } else { 'O' },
            if self.scrambled { 'S' } else { 'U' }
        )
    }
}

impl Serialize for SemVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SemVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemGroundTruth {
    pub variant: SemVariant,
    pub w_causal: Vec<f64>,
    pub w_anticausal: Vec<f64>,
    /// `2d × 2d`; observed features are `scramble · [X; Z]`.
    pub scramble: Array2<f64>,
}

impl SemGroundTruth {
    /// Identity-scrambled truth with the given weights (variant FOU).
    pub fn unscrambled(w_causal: Vec<f64>, w_anticausal: Vec<f64>) -> Self {
        let d = w_causal.len();
        SemGroundTruth {
            variant: SemVariant {
                partially_observed: false,
                heteroskedastic: false,
                scrambled: false,
            },
            w_causal,
            w_anticausal,
            scramble: Array2::eye(2 * d),
        }
    }
}

/// Orthogonal factor of a Gaussian matrix (Gram–Schmidt, applied twice for
/// numerical orthogonality).
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
    for _ in 0..2 {
        for j in 0..n {
            for k in 0..j {
                let proj = q.column(j).dot(&q.column(k));
                let ck = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-proj, &ck);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    q
}

/// One regression dataset per noise level, sharing one ground truth.
///
/// Per environment with scale `σ`: `X ~ N(0, σ²I)`, `Y = X·w_causal + ε_y`,
/// `Z = Y·w_anticausal + ε_z`. Homoskedastic (`O`): `Var ε_y = σ²`,
/// `Var ε_z = 1`; heteroskedastic (`E`): `Var ε_y = 1`, `Var ε_z = σ²`.
/// Partially observed (`P`): `h ~ N(0, σ²)` is added to every observed
/// coordinate of X and Z after Y is drawn.
pub fn gen_sem(
    variant: SemVariant,
    d: usize,
    n_per_env: usize,
    env_noises: &[f64],
    seed: RngSeed,
) -> Result<(Vec<Dataset>, SemGroundTruth)> {
    if d == 0 || n_per_env == 0 {
        return Err(Error::InvalidSpec("SEM needs d ≥ 1 and n_per_env ≥ 1".into()));
    }
    if env_noises.is_empty() || env_noises.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidSpec("SEM noise levels must be positive".into()));
    }
    let mut rng = seed.derive("sem-truth").rng();
    let scale = 1.0 / (d as f64).sqrt();
    let w_causal: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    let w_anticausal: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    let scramble = if variant.scrambled {
        random_orthogonal(2 * d, &mut rng)
    } else {
        Array2::eye(2 * d)
    };
    let truth = SemGroundTruth {
        variant,
        w_causal,
        w_anticausal,
        scramble,
    };
    let datasets = env_noises
        .iter()
        .enumerate()
        .map(|(e, &sigma)| {
            let mut rng = seed.derive(&format!("sem-env-{e}")).rng();
            sem_environment(&truth, n_per_env, sigma, e as i32, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok((datasets, truth))
}

fn sem_environment(truth: &SemGroundTruth, n: usize, sigma: f64, env: i32, rng: &mut Rng) -> Result<Dataset> {
    let d = truth.w_causal.len();
    let (sy, sz) = if truth.variant.heteroskedastic {
        (1.0, sigma)
    } else {
        (sigma, 1.0)
    };
    let mut raw = Array2::zeros((n, 2 * d));
    let mut y = Vec::with_capacity(n);
    let mut gauss = || rng.sample::<f64, _>(StandardNormal);
    for i in 0..n {
        let mut yi = 0.0;
        for j in 0..d {
            let x = sigma * gauss();
            raw[[i, j]] = x;
            yi += x * truth.w_causal[j];
        }
        yi += sy * gauss();
        for j in 0..d {
            raw[[i, d + j]] = yi * truth.w_anticausal[j] + sz * gauss();
        }
        if truth.variant.partially_observed {
            let h = sigma * gauss();
            raw.row_mut(i).mapv_inplace(|v| v + h);
        }
        y.push(yi);
    }
    let features = if truth.variant.scrambled {
        raw.dot(&truth.scramble.t())
    } else {
        raw
    };
    Dataset::new(
        features,
        Labels::Real(y),
        Task::Regression,
        Meta {
            env_id: Some(vec![env; n]),
            ..Meta::default()
        },
    )
}

/// Noise levels for training environments, validation and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemProtocol {
    pub train_noises: Vec<f64>,
    pub val_noise: f64,
    pub test_noise: f64,
}

impl Default for SemProtocol {
    fn default() -> Self {
        SemProtocol {
            train_noises: vec![0.2, 2.0],
            val_noise: 3.5,
            test_noise: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemSplits {
    pub train: Vec<Dataset>,
    pub val: Dataset,
    pub test: Dataset,
    pub truth: SemGroundTruth,
}

pub fn gen_sem_protocol(
    variant: SemVariant,
    d: usize,
    n_per_env: usize,
    protocol: &SemProtocol,
    seed: RngSeed,
) -> Result<SemSplits> {
    let mut noises = protocol.train_noises.clone();
    noises.push(protocol.val_noise);
    noises.push(protocol.test_noise);
    let (mut sets, truth) = gen_sem(variant, d, n_per_env, &noises, seed)?;
    let test = sets.pop().expect("test set");
    let val = sets.pop().expect("validation set");
    Ok(SemSplits {
        train: sets,
        val,
        test,
        truth,
    })
}

// ---------------------------------------------------------------------------
// Class → background mappings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleRule {
    /// Any background other than the class's train and test backgrounds.
    AnyOfRemaining,
    /// One fixed alternative background per class.
    OnePredecided(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub train_map: Vec<usize>,
    pub test_map: Vec<usize>,
    pub shuffle_rule: ShuffleRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CbVariant {
    I,
    II,
    III,
}

impl CbVariant {
    pub fn default_shuffle_probs(self) -> (f64, f64) {
        match self {
            CbVariant::I | CbVariant::II => (0.01, 0.02),
            CbVariant::III => (0.10, 0.20),
        }
    }
}

impl FromStr for CbVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(CbVariant::I),
            "II" => Ok(CbVariant::II),
            "III" => Ok(CbVariant::III),
            _ => Err(Error::InvalidSpec(format!("unknown CBMNIST variant `{s}`"))),
        }
    }
}

fn is_permutation(m: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    m.len() == k && m.iter().all(|&v| v < k && !std::mem::replace(&mut seen[v], true))
}

impl ClassMapping {
    /// Random train map, a test map disagreeing with it on every class, and
    /// (variant II) one predecided alternative per class.
    pub fn random(k: usize, variant: CbVariant, rng: &mut Rng) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidSpec("background mapping needs at least 3 classes".into()));
        }
        let mut train_map: Vec<usize> = (0..k).collect();
        train_map.shuffle(rng);
        let mut test_map = train_map.clone();
        // rejection-sample a derangement relative to the train map
        while test_map.iter().zip(&train_map).any(|(a, b)| a == b) {
            test_map.shuffle(rng);
        }
        let shuffle_rule = match variant {
            CbVariant::I | CbVariant::III => ShuffleRule::AnyOfRemaining,
            CbVariant::II => ShuffleRule::OnePredecided(
                (0..k)
                    .map(|c| {
                        let options: Vec<usize> =
                            (0..k).filter(|&b| b != train_map[c] && b != test_map[c]).collect();
                        *options.choose(rng).expect("k ≥ 3 leaves an option")
                    })
                    .collect(),
            ),
        };
        let m = ClassMapping {
            train_map,
            test_map,
            shuffle_rule,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.train_map.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.train_map.len();
        if !is_permutation(&self.train_map, k) || !is_permutation(&self.test_map, k) {
            return Err(Error::InvalidSpec("background maps must be bijections".into()));
        }
        if self.train_map.iter().zip(&self.test_map).any(|(a, b)| a == b) {
            return Err(Error::InvalidSpec(
                "test background must differ from train background for every class".into(),
            ));
        }
        if let ShuffleRule::OnePredecided(alt) = &self.shuffle_rule {
            if alt.len() != k
                || alt
                    .iter()
                    .enumerate()
                    .any(|(c, &a)| a >= k || a == self.train_map[c] || a == self.test_map[c])
            {
                return Err(Error::InvalidSpec(
                    "predecided alternative must differ from train and test backgrounds".into(),
                ));
            }
        }
        Ok(())
    }

    /// Background of a training sample of class `c`.
    pub fn train_background(&self, c: usize, shuffled: bool, rng: &mut Rng) -> usize {
        if !shuffled {
            return self.train_map[c];
        }
        match &self.shuffle_rule {
            ShuffleRule::OnePredecided(alt) => alt[c],
            ShuffleRule::AnyOfRemaining => {
                let k = self.num_classes();
                let (a, b) = (self.train_map[c], self.test_map[c]);
                // uniform over the k − 2 remaining backgrounds
                let mut r = rng.random_range(0..k - 2);
                for bg in 0..k {
                    if bg == a || bg == b {
                        continue;
                    }
                    if r == 0 {
                        return bg;
                    }
                    r -= 1;
                }
                unreachable!("k − 2 candidates enumerated")
            }
        }
    }
}

fn noisy_label(c: usize, k: usize, noise: f64, rng: &mut Rng) -> usize {
    if noise > 0.0 && rng.random_bool(noise) {
        let other = rng.random_range(0..k - 1);
        if other >= c {
            other + 1
        } else {
            other
        }
    } else {
        c
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{name} = {p} is not a probability")))
    }
}

/// Per-sample label, background and shuffle flag for one environment.
struct Assignment {
    label: usize,
    background: usize,
    shuffled: bool,
}

fn assign(
    causal: usize,
    k: usize,
    label_noise: f64,
    mapping: &ClassMapping,
    shuffle_prob: Option<f64>,
    rng: &mut Rng,
) -> Assignment {
    let label = noisy_label(causal, k, label_noise, rng);
    match shuffle_prob {
        Some(p) => {
            let shuffled = p > 0.0 && rng.random_bool(p);
            Assignment {
                label,
                background: mapping.train_background(label, shuffled, rng),
                shuffled,
            }
        }
        None => Assignment {
            label,
            background: mapping.test_map[label],
            shuffled: false,
        },
    }
}

// ---------------------------------------------------------------------------
// Download-free background benchmark
// ---------------------------------------------------------------------------

fn default_n_per_env() -> usize {
    5000
}
fn default_n_test() -> usize {
    2000
}
fn default_k() -> usize {
    10
}
fn default_dims() -> usize {
    20
}
fn default_shuffle_probs() -> (f64, f64) {
    (0.01, 0.02)
}
fn default_causal_std() -> f64 {
    0.45
}
fn default_misdrawn() -> f64 {
    0.02
}
fn default_spurious_std() -> f64 {
    0.2
}
fn default_variant() -> CbVariant {
    CbVariant::I
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySpec {
    #[serde(default = "default_n_per_env")]
    pub n_per_env: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_k")]
    pub k_classes: usize,
    /// Total feature width; the first half is the causal block.
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_shuffle_probs")]
    pub shuffle_probs: (f64, f64),
    #[serde(default = "default_variant")]
    pub variant: CbVariant,
    #[serde(default = "default_causal_std")]
    pub causal_std: f64,
    #[serde(default = "default_spurious_std")]
    pub spurious_std: f64,
    /// Probability that a sample's causal block is drawn around another
    /// class's centre (a digit that looks like a different digit).
    #[serde(default = "default_misdrawn")]
    pub misdrawn: f64,
}

impl Default for ProxySpec {
    fn default() -> Self {
        ProxySpec {
            n_per_env: default_n_per_env(),
            n_test: default_n_test(),
            k_classes: default_k(),
            dims: default_dims(),
            shuffle_probs: default_shuffle_probs(),
            variant: default_variant(),
            causal_std: default_causal_std(),
            spurious_std: default_spurious_std(),
            misdrawn: default_misdrawn(),
        }
    }
}

impl ProxySpec {
    fn validate(&self) -> Result<()> {
        let k = self.k_classes;
        if k < 3 {
            return Err(Error::InvalidSpec("k_classes must be at least 3".into()));
        }
        if self.dims < 2 * k {
            return Err(Error::InvalidSpec(format!("dims must be at least {} (2·k_classes)", 2 * k)));
        }
        if self.n_per_env == 0 || self.n_test == 0 {
            return Err(Error::InvalidSpec("environment sizes must be positive".into()));
        }
        if !(self.spurious_std > 0.0 && self.spurious_std < self.causal_std) {
            return Err(Error::InvalidSpec(
                "spurious_std must be positive and strictly below causal_std".into(),
            ));
        }
        check_prob("shuffle_probs.0", self.shuffle_probs.0)?;
        check_prob("shuffle_probs.1", self.shuffle_probs.1)?;
        check_prob("misdrawn", self.misdrawn)
    }
}

#[derive(Debug, Clone)]
pub struct BackgroundBenchmark {
    pub env1: Dataset,
    pub env2: Dataset,
    pub test: Dataset,
    pub mapping: ClassMapping,
}

/// Gaussian-cluster analogue of digit-on-background images. The causal block
/// is centred on the one-hot of the class, the spurious block on the one-hot
/// of the background class. `causal_id` is the cluster the causal block
/// actually lands in (its nearest centre), `spurious_id` the background used.
pub fn gen_proxy_cbmnist(spec: &ProxySpec, seed: RngSeed) -> Result<BackgroundBenchmark> {
    spec.validate()?;
    let k = spec.k_classes;
    let mapping = ClassMapping::random(k, spec.variant, &mut seed.derive("mapping").rng())?;
    let causal_dims = spec.dims / 2;
    let env = |env_id: i32, n: usize, shuffle: Option<f64>, stream: &str| -> Result<Dataset> {
        let mut rng = seed.derive(stream).rng();
        let cn = Normal::new(0.0, spec.causal_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let sn = Normal::new(0.0, spec.spurious_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let mut x = Array2::zeros((n, spec.dims));
        let mut labels = Vec::with_capacity(n);
        let mut meta = MetaBuilder::with_capacity(n);
        for i in 0..n {
            let label = rng.random_range(0..k);
            let drawn = noisy_label(label, k, spec.misdrawn, &mut rng);
            let a = assign(label, k, 0.0, &mapping, shuffle, &mut rng);
            let mut row = x.row_mut(i);
            for j in 0..spec.dims {
                row[j] = if j < causal_dims {
                    cn.sample(&mut rng) + f64::from(u8::from(j == drawn))
                } else {
                    sn.sample(&mut rng) + f64::from(u8::from(j - causal_dims == a.background))
                };
            }
            labels.push(a.label as u32);
            meta.push(env_id, a.background, nearest_center(&row.as_slice().expect("row-major")[..k]), a.shuffled);
        }
        Dataset::new(x, Labels::Class(labels), Task::Multiclass(k), meta.build())
    };
    Ok(BackgroundBenchmark {
        env1: env(0, spec.n_per_env, Some(spec.shuffle_probs.0), "env1")?,
        env2: env(1, spec.n_per_env, Some(spec.shuffle_probs.1), "env2")?,
        test: env(2, spec.n_test, None, "test")?,
        mapping,
    })
}

/// Index of the nearest one-hot centre, i.e. the first argmax.
fn nearest_center(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

struct MetaBuilder {
    env: Vec<i32>,
    spurious: Vec<i32>,
    causal: Vec<i32>,
    shuffled: Vec<bool>,
}

impl MetaBuilder {
    fn with_capacity(n: usize) -> Self {
        MetaBuilder {
            env: Vec::with_capacity(n),
            spurious: Vec::with_capacity(n),
            causal: Vec::with_capacity(n),
            shuffled: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, env: i32, spurious: usize, causal: usize, shuffled: bool) {
        self.env.push(env);
        self.spurious.push(spurious as i32);
        self.causal.push(causal as i32);
        self.shuffled.push(shuffled);
    }

    fn build(self) -> Meta {
        Meta {
            env_id: Some(self.env),
            spurious_id: Some(self.spurious),
            causal_id: Some(self.causal),
            is_shuffled: Some(self.shuffled),
        }
    }
}

// ---------------------------------------------------------------------------
// Digit-on-background composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSpec {
    /// One 32×32 RGB image (CIFAR plane layout) per background class.
    pub backgrounds: Vec<Box<[u8; CIFAR_PIXELS]>>,
    pub mapping: ClassMapping,
}

impl BackgroundSpec {
    pub fn validate(&self) -> Result<()> {
        self.mapping.validate()?;
        if self.backgrounds.len() != self.mapping.num_classes() {
            return Err(Error::InvalidSpec(format!(
                "{} backgrounds for {} classes",
                self.backgrounds.len(),
                self.mapping.num_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CbmnistConfig {
    /// Defaults to 25000, or 5/12 of the foregrounds when fewer than 60000.
    pub n_per_env: Option<usize>,
    /// Defaults to 10000, or the remaining foregrounds.
    pub n_test: Option<usize>,
    /// Defaults to the variant's probabilities.
    pub shuffle_probs: Option<(f64, f64)>,
    #[serde(default)]
    pub label_noise: f64,
}

/// Pastes a 28×28 digit, binarised at 0.5, centred on a 32×32 background.
/// Digit pixels become white in all three planes.
pub fn composite(foreground: &[f64], background: &[u8; CIFAR_PIXELS]) -> Vec<f64> {
    let mut out: Vec<f64> = background.iter().map(|&b| f64::from(b) / 255.0).collect();
    for r in 0..28 {
        for c in 0..28 {
            if foreground[r * 28 + c] > 0.5 {
                let pos = (r + 2) * 32 + (c + 2);
                for plane in 0..3 {
                    out[plane * 1024 + pos] = 1.0;
                }
            }
        }
    }
    out
}

pub fn gen_cbmnist(
    variant: CbVariant,
    foregrounds: &Dataset,
    spec: &BackgroundSpec,
    cfg: &CbmnistConfig,
    seed: RngSeed,
) -> Result<BackgroundBenchmark> {
    spec.validate()?;
    if foregrounds.dim() != 28 * 28 {
        return Err(Error::InvalidSpec("foregrounds must be 28×28 images".into()));
    }
    if spec.mapping.num_classes() != 10 {
        return Err(Error::InvalidSpec("CBMNIST uses ten background classes".into()));
    }
    let digits = foregrounds.class_labels()?;
    let total = foregrounds.len();
    let n_env = cfg.n_per_env.unwrap_or(if total >= 60_000 { 25_000 } else { total * 5 / 12 });
    let n_test = cfg
        .n_test
        .unwrap_or_else(|| 10_000.min(total.saturating_sub(2 * n_env)));
    if n_env == 0 || n_test == 0 || 2 * n_env + n_test > total {
        return Err(Error::InvalidSpec(format!(
            "cannot draw 2×{n_env} + {n_test} samples from {total} foregrounds"
        )));
    }
    let probs = cfg.shuffle_probs.unwrap_or(variant.default_shuffle_probs());
    check_prob("shuffle_probs.0", probs.0)?;
    check_prob("shuffle_probs.1", probs.1)?;
    check_prob("label_noise", cfg.label_noise)?;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seed.derive("cbmnist-split").rng());
    let fg = foregrounds.features();
    let build = |env_id: i32, idx: &[usize], shuffle: Option<f64>, stream: &str| -> Result<Dataset> {
        let mut rng = seed.derive(stream).rng();
        let mut x = Array2::zeros((idx.len(), CIFAR_PIXELS));
        let mut labels = Vec::with_capacity(idx.len());
        let mut meta = MetaBuilder::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let digit = digits[i] as usize;
            let a = assign(digit, 10, cfg.label_noise, &spec.mapping, shuffle, &mut rng);
            let pixels = composite(
                fg.row(i).as_slice().expect("row-major features"),
                &spec.backgrounds[a.background],
            );
            x.row_mut(row).assign(&Array1::from(pixels));
            labels.push(a.label as u32);
            meta.push(env_id, a.background, digit, a.shuffled);
        }
        Dataset::new(x, Labels::Class(labels), Task::Multiclass(10), meta.build())
    };
    Ok(BackgroundBenchmark {
        env1: build(0, &order[..n_env], Some(probs.0), "env1")?,
        env2: build(1, &order[n_env..2 * n_env], Some(probs.1), "env2")?,
        test: build(2, &order[2 * n_env..2 * n_env + n_test], None, "test")?,
        mapping: spec.mapping.clone(),
    })
}

// ---------------------------------------------------------------------------
// Colour-spurious binary classification
// ---------------------------------------------------------------------------

fn default_color_label_noise() -> f64 {
    0.25
}
fn default_env_flips() -> Vec<f64> {
    vec![0.1, 0.2]
}
fn default_test_flip() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorParams {
    #[serde(default = "default_color_label_noise")]
    pub label_noise: f64,
    /// Per training environment: probability that colour disagrees with the label.
    #[serde(default = "default_env_flips")]
    pub env_color_flips: Vec<f64>,
    #[serde(default = "default_test_flip")]
    pub test_color_flip: f64,
    #[serde(default = "default_n_per_env")]
    pub n_per_env: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

impl Default for ColorParams {
    fn default() -> Self {
        ColorParams {
            label_noise: default_color_label_noise(),
            env_color_flips: default_env_flips(),
            test_color_flip: default_test_flip(),
            n_per_env: default_n_per_env(),
            n_test: default_n_test(),
        }
    }
}

/// Gaussian-cluster digits for colour benchmarks without image files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorProxySpec {
    #[serde(default = "default_k")]
    pub k_classes: usize,
    #[serde(default = "default_causal_std")]
    pub causal_std: f64,
    #[serde(default = "default_spurious_std")]
    pub color_std: f64,
}

impl Default for ColorProxySpec {
    fn default() -> Self {
        ColorProxySpec {
            k_classes: default_k(),
            causal_std: default_causal_std(),
            color_std: default_spurious_std(),
        }
    }
}

pub enum ColorBase<'a> {
    /// 28×28 digit images; downsampled to 14×14 and split into two colour channels.
    Images(&'a Dataset),
    Proxy(&'a ColorProxySpec),
}

#[derive(Debug, Clone)]
pub struct ColorBenchmark {
    pub train: Vec<Dataset>,
    pub test: Dataset,
}

/// Binary label = class parity, flipped with probability `label_noise`; the
/// colour equals the label except with the environment's flip probability.
pub fn gen_color_spurious(base: ColorBase<'_>, params: &ColorParams, seed: RngSeed) -> Result<ColorBenchmark> {
    check_prob("label_noise", params.label_noise)?;
    check_prob("test_color_flip", params.test_color_flip)?;
    for (i, p) in params.env_color_flips.iter().enumerate() {
        check_prob(&format!("env_color_flips[{i}]"), *p)?;
    }
    if params.env_color_flips.is_empty() || params.n_per_env == 0 || params.n_test == 0 {
        return Err(Error::InvalidSpec("need at least one non-empty training environment".into()));
    }
    let n_envs = params.env_color_flips.len();
    let needed = n_envs * params.n_per_env + params.n_test;
    let flips: Vec<f64> = params
        .env_color_flips
        .iter()
        .copied()
        .chain(std::iter::once(params.test_color_flip))
        .collect();

    // causal class per sample and a closure producing its features given the colour
    let order: Vec<usize> = match base {
        ColorBase::Images(d) => {
            if d.dim() != 28 * 28 || d.len() < needed {
                return Err(Error::InvalidSpec(format!(
                    "colour benchmark needs {needed} 28×28 images, got {} of width {}",
                    d.len(),
                    d.dim()
                )));
            }
            let mut o: Vec<usize> = (0..d.len()).collect();
            o.shuffle(&mut seed.derive("color-split").rng());
            o
        }
        ColorBase::Proxy(_) => (0..needed).collect(),
    };
    let mut out = Vec::with_capacity(n_envs + 1);
    let mut start = 0;
    for (e, &flip) in flips.iter().enumerate() {
        let n = if e < n_envs { params.n_per_env } else { params.n_test };
        let idx = &order[start..start + n];
        start += n;
        let mut rng = seed.derive(&format!("color-env-{e}")).rng();
        let (dim, k) = match base {
            ColorBase::Images(_) => (2 * 14 * 14, 10),
            ColorBase::Proxy(p) => (p.k_classes + 2, p.k_classes),
        };
        let mut x = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        let mut meta = MetaBuilder::with_capacity(n);
        for (row, &i) in idx.iter().enumerate() {
            let causal = match base {
                ColorBase::Images(d) => d.class_labels()?[i] as usize,
                ColorBase::Proxy(_) => rng.random_range(0..k),
            };
            let mut y = (causal % 2) as u32;
            if rng.random_bool(params.label_noise) {
                y ^= 1;
            }
            let color = if rng.random_bool(flip) { y ^ 1 } else { y };
            let mut r = x.row_mut(row);
            match base {
                ColorBase::Images(d) => {
                    let img = d.features().row(i);
                    let off = color as usize * 196;
                    for a in 0..14 {
                        for b in 0..14 {
                            r[off + a * 14 + b] = img[(2 * a) * 28 + 2 * b];
                        }
                    }
                }
                ColorBase::Proxy(p) => {
                    let cn = Normal::new(0.0, p.causal_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
                    let sn = Normal::new(0.0, p.color_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
                    for j in 0..k {
                        r[j] = cn.sample(&mut rng) + f64::from(u8::from(j == causal));
                    }
                    for c in 0..2 {
                        r[k + c] = sn.sample(&mut rng) + f64::from(u8::from(c as u32 == color));
                    }
                }
            }
            labels.push(y);
            meta.push(e as i32, color as usize, causal, color != y);
        }
        out.push(Dataset::new(x, Labels::Class(labels), Task::Binary, meta.build())?);
    }
    let test = out.pop().expect("test environment");
    Ok(ColorBenchmark { train: out, test })
}

// ---------------------------------------------------------------------------
// Regrouping
// ---------------------------------------------------------------------------

/// Pools two environments and regroups them: `env0` gets every unshuffled
/// sample, `env1` every shuffled one.
pub fn regroup_shuffled(env1: &Dataset, env2: &Dataset) -> Result<PartitionSplit> {
    let pool = Dataset::concat(&[env1, env2])?;
    let hard = pool.is_shuffled()?.iter().map(|&s| u8::from(s)).collect();
    split_by_partition(&pool, &EnvPartition::from_hard(hard)?)
}

/// Fraction of rows flagged shuffled.
pub fn shuffled_fraction(d: &Dataset) -> Result<f64> {
    let s = d.is_shuffled()?;
    Ok(s.iter().filter(|&&b| b).count() as f64 / s.len() as f64)
}

/// Digit canvases for tests and demos: a bar whose position encodes the class.
pub fn synthetic_digits(n: usize, seed: RngSeed) -> Result<Dataset> {
    let mut rng = seed.rng();
    let mut x = Array2::zeros((n, 28 * 28));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..10usize);
        let col = 3 + 2 * c;
        x.slice_mut(s![i, ..]).fill(0.0);
        for r in 6..22 {
            x[[i, r * 28 + col]] = 0.9;
        }
        labels.push(c as u32);
    }
    let causal = labels.iter().map(|&c| c as i32).collect();
    Dataset::new(
        x,
        Labels::Class(labels),
        Task::Multiclass(10),
        Meta {
            causal_id: Some(causal),
            ..Meta::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for name in SemVariant::ALL {
            assert_eq!(name.parse::<SemVariant>().unwrap().to_string(), name);
        }
        assert!("FOX".parse::<SemVariant>().is_err());
        assert!("FO".parse::<SemVariant>().is_err());
    }

    #[test]
    fn unscrambled_features_are_raw_x() {
        let (sets, truth) = gen_sem("FOU".parse().unwrap(), 3, 50, &[1.0], RngSeed(1)).unwrap();
        assert_eq!(truth.scramble, Array2::<f64>::eye(6));
        // residual Y − X·w_causal is the target noise, Z depends on Y only
        let d = &sets[0];
        assert_eq!(d.dim(), 6);
        assert_eq!(d.meta().env_id.as_ref().unwrap()[0], 0);
    }

    #[test]
    fn scramble_is_orthogonal() {
        let (_, truth) = gen_sem("FES".parse().unwrap(), 4, 10, &[1.0], RngSeed(2)).unwrap();
        let prod = truth.scramble.dot(&truth.scramble.t());
        for ((i, j), v) in prod.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_free_limit_has_zero_causal_residual() {
        let (sets, truth) = gen_sem("FOU".parse().unwrap(), 3, 100, &[1e-9], RngSeed(3)).unwrap();
        let d = &sets[0];
        let y = d.labels().as_real().unwrap();
        for (i, row) in d.features().rows().into_iter().enumerate() {
            let pred: f64 = (0..3).map(|j| row[j] * truth.w_causal[j]).sum();
            assert!((pred - y[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sem_rejects_bad_noise() {
        assert!(gen_sem("FOU".parse().unwrap(), 3, 10, &[0.0], RngSeed(0)).is_err());
        assert!(gen_sem("FOU".parse().unwrap(), 0, 10, &[1.0], RngSeed(0)).is_err());
    }

    #[test]
    fn mapping_invariants() {
        let mut rng = RngSeed(5).rng();
        for v in [CbVariant::I, CbVariant::II, CbVariant::III] {
            let m = ClassMapping::random(10, v, &mut rng).unwrap();
            m.validate().unwrap();
            for c in 0..10 {
                for _ in 0..20 {
                    let b = m.train_background(c, true, &mut rng);
                    assert!(b != m.train_map[c] && b != m.test_map[c]);
                }
                assert_eq!(m.train_background(c, false, &mut rng), m.train_map[c]);
            }
        }
        let mut bad = ClassMapping::random(10, CbVariant::I, &mut rng).unwrap();
        bad.test_map = bad.train_map.clone();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn composite_overlays_binarised_digit() {
        let mut fg = vec![0.0; 784];
        fg[0] = 0.9;
        fg[1] = 0.4;
        let bg = Box::new([51u8; CIFAR_PIXELS]);
        let img = composite(&fg, &bg);
        let pos = 2 * 32 + 2;
        for plane in 0..3 {
            assert_eq!(img[plane * 1024 + pos], 1.0);
            assert_eq!(img[plane * 1024 + pos + 1], 0.2);
        }
    }

    #[test]
    fn proxy_spec_validation() {
        let bad = ProxySpec {
            spurious_std: 1.0,
            causal_std: 0.5,
            ..ProxySpec::default()
        };
        assert!(gen_proxy_cbmnist(&bad, RngSeed(0)).is_err());
        let narrow = ProxySpec {
            dims: 10,
            ..ProxySpec::default()
        };
        assert!(gen_proxy_cbmnist(&narrow, RngSeed(0)).is_err());
    }

    #[test]
    fn regroup_with_no_shuffles_leaves_env1_empty() {
        let spec = ProxySpec {
            n_per_env: 200,
            n_test: 10,
            shuffle_probs: (0.0, 0.0),
            ..ProxySpec::default()
        };
        let b = gen_proxy_cbmnist(&spec, RngSeed(1)).unwrap();
        let r = regroup_shuffled(&b.env1, &b.env2).unwrap();
        assert_eq!(r.sizes(), (400, 0));
    }
}

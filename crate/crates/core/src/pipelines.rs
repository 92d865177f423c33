//! End-to-end training procedures: ERM, IRM on given environments, WERM,
//! environment inference and the repeated-inference loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{split_by_partition, Dataset, EnvPartition};
use crate::datagen::regroup_shuffled;
use crate::envinfer::{ei_optimize, majority_split, EiConfig, EiResult};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, conjecture_gap, evaluate};
use crate::models::{train, train_objective, Model, ModelSpec, OptimSpec, OptimizerState};
use crate::objectives::{per_sample_stats, stack_environments, werm_weights, IrmObjective};
use crate::rng::RngSeed;

/// Architecture plus optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub optim: OptimSpec,
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0, 10.0, 100.0, 1000.0, 10000.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrmSpec {
    /// Candidate penalty weights; more than one requires a validation set.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Steps with penalty weight 1; defaults to 100 for classification, 0 for regression.
    #[serde(default)]
    pub anneal_steps: Option<usize>,
}

impl Default for IrmSpec {
    fn default() -> Self {
        IrmSpec {
            lambdas: default_lambdas(),
            anneal_steps: None,
        }
    }
}

impl IrmSpec {
    pub fn single(lambda: f64) -> Self {
        IrmSpec {
            lambdas: vec![lambda],
            anneal_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IlKind {
    #[default]
    Irm,
    Werm,
}

fn default_iters() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReiilConfig {
    #[serde(default = "default_iters")]
    pub n_iters: usize,
    #[serde(default)]
    pub il_kind: IlKind,
    #[serde(default)]
    pub ei: EiConfig,
}

impl Default for ReiilConfig {
    fn default() -> Self {
        ReiilConfig {
            n_iters: default_iters(),
            il_kind: IlKind::Irm,
            ei: EiConfig::default(),
        }
    }
}

/// A trained model with the loss before each optimiser step.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: Model,
    pub loss_trace: Vec<f64>,
}

pub fn run_erm(pool: &Dataset, cfg: &TrainConfig, seed: RngSeed) -> Result<Fit> {
    if pool.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut model = cfg.model.build(pool.dim(), pool.task(), seed)?;
    let mut opt = OptimizerState::adam(model.num_params(), &cfg.optim);
    let weights = vec![1.0; pool.len()];
    let loss_trace = train(&mut model, pool, &weights, &mut opt, cfg.optim.steps, cfg.optim.l2, None)?;
    Ok(Fit { model, loss_trace })
}

/// Weighted ERM: every environment carries equal total weight.
pub fn run_werm(envs: &[&Dataset], cfg: &TrainConfig, seed: RngSeed) -> Result<Fit> {
    let (pool, _) = stack_environments(envs)?;
    let sizes: Vec<usize> = envs.iter().map(|e| e.len()).collect();
    let weights = werm_weights(&sizes)?;
    let mut model = cfg.model.build(pool.dim(), pool.task(), seed)?;
    let mut opt = OptimizerState::adam(model.num_params(), &cfg.optim);
    let loss_trace = train(&mut model, &pool, &weights, &mut opt, cfg.optim.steps, cfg.optim.l2, None)?;
    Ok(Fit { model, loss_trace })
}

/// IRMv1 at a single penalty weight.
pub fn train_irm(envs: &[&Dataset], cfg: &TrainConfig, lambda: f64, anneal_steps: usize, seed: RngSeed) -> Result<Fit> {
    if envs.len() < 2 {
        return Err(Error::InvalidSpec("IRM needs at least two environments".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidSpec(format!("invalid penalty weight {lambda}")));
    }
    let (pool, groups) = stack_environments(envs)?;
    let mut model = cfg.model.build(pool.dim(), pool.task(), seed)?;
    let mut opt = OptimizerState::adam(model.num_params(), &cfg.optim);
    let obj = IrmObjective {
        labels: pool.labels(),
        task: pool.task(),
        groups,
        lambda,
        anneal_steps,
    };
    let loss_trace = train_objective(&mut model, pool.features(), &obj, &mut opt, cfg.optim.steps, cfg.optim.l2)?;
    Ok(Fit { model, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub val_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IrmFit {
    pub model: Model,
    pub lambda: f64,
    pub val_error: Option<f64>,
    pub sweep: Vec<LambdaScore>,
}

/// IRMv1 over every candidate penalty weight, keeping the one with the
/// lowest validation error.
pub fn run_irm(
    envs: &[&Dataset],
    cfg: &TrainConfig,
    spec: &IrmSpec,
    val: Option<&Dataset>,
    seed: RngSeed,
) -> Result<IrmFit> {
    if spec.lambdas.is_empty() {
        return Err(Error::InvalidSpec("no penalty weights given".into()));
    }
    if spec.lambdas.len() > 1 && val.is_none() {
        return Err(Error::InvalidSpec(
            "a penalty-weight sweep needs a validation set".into(),
        ));
    }
    let task = envs.first().ok_or(Error::EmptyEnvironment(0))?.task();
    let anneal = spec
        .anneal_steps
        .unwrap_or(if task.is_classification() { 100 } else { 0 });
    let mut candidates = Vec::with_capacity(spec.lambdas.len());
    for &lambda in &spec.lambdas {
        let fit = train_irm(envs, cfg, lambda, anneal, seed)?;
        candidates.push((lambda, fit.model));
    }
    match val {
        None => {
            let (lambda, model) = candidates.pop().expect("one candidate");
            Ok(IrmFit {
                model,
                lambda,
                val_error: None,
                sweep: vec![LambdaScore { lambda, val_error: None }],
            })
        }
        Some(v) => {
            let sweep = candidates
                .iter()
                .map(|(lambda, m)| {
                    Ok(LambdaScore {
                        lambda: *lambda,
                        val_error: Some(evaluate(m, v)?.error),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (lambda, model, err) = select_model(candidates, v)?;
            Ok(IrmFit {
                model,
                lambda,
                val_error: Some(err),
                sweep,
            })
        }
    }
}

/// Candidate with the lowest validation error; ties go to the earliest.
pub fn select_model<C>(candidates: Vec<(C, Model)>, validation: &Dataset) -> Result<(C, Model, f64)> {
    let mut best: Option<(C, Model, f64)> = None;
    for (c, m) in candidates {
        let err = evaluate(&m, validation)?.error;
        if best.as_ref().is_none_or(|b| err < b.2) {
            best = Some((c, m, err));
        }
    }
    best.ok_or_else(|| Error::InvalidSpec("no candidates to select from".into()))
}

/// Environment inference driven by a fixed reference model.
pub fn run_ei_step(reference: &Model, pool: &Dataset, cfg: &EiConfig, seed: RngSeed) -> Result<EiResult> {
    let out = reference.forward(pool.features())?;
    let stats = per_sample_stats(&out, pool.labels(), pool.task())?;
    ei_optimize(&stats, cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Completed,
    /// Every sample fell on one side at this iteration.
    MinorityEmpty { iteration: usize },
    /// The reference model's per-sample gradients were all zero.
    DegenerateGradients { iteration: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub ei_objective: f64,
    pub majority_env: u8,
    pub majority_size: usize,
    pub minority_size: usize,
    /// Accuracy, on the pool, of the reference model that produced this partition.
    pub reference_pool_accuracy: Option<f64>,
    /// Error of an ERM model retrained on this majority, on the majority itself.
    pub majority_error: f64,
    /// Error of the same model on the held-out minority.
    pub minority_error: f64,
    pub majority_train_accuracy: Option<f64>,
    pub minority_accuracy: Option<f64>,
    pub minority_shuffled_fraction: Option<f64>,
    pub pool_shuffled_fraction: Option<f64>,
    /// `conjecture_gap(pool, majority)`.
    pub conjecture_gap: Option<f64>,
    pub partition: EnvPartition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub iterations: Vec<IterationRecord>,
    pub stop: StopReason,
    pub il_kind: IlKind,
    pub final_partition: Option<EnvPartition>,
    pub final_lambda: Option<f64>,
    pub final_val_error: Option<f64>,
    pub lambda_sweep: Vec<LambdaScore>,
    #[serde(skip)]
    pub final_model: Option<Model>,
}

impl PipelineTrace {
    pub fn is_degenerate(&self) -> bool {
        self.final_partition.is_none()
    }

    /// Per-iteration diagnostics, one row per iteration.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from(
            "iteration,ei_objective,majority_size,minority_size,reference_pool_accuracy,majority_error,minority_error,minority_accuracy,minority_shuffled_fraction,conjecture_gap\n",
        );
        for r in &self.iterations {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.ei_objective,
                r.majority_size,
                r.minority_size,
                opt(r.reference_pool_accuracy),
                r.majority_error,
                r.minority_error,
                opt(r.minority_accuracy),
                opt(r.minority_shuffled_fraction),
                opt(r.conjecture_gap),
            );
        }
        s
    }
}

fn fraction_true(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

fn has_mi_meta(d: &Dataset) -> bool {
    d.task().is_classification() && d.meta().spurious_id.is_some() && d.meta().causal_id.is_some()
}

/// Seed streams used by [`run_reiil`], exposed so that callers can reproduce
/// a stage by hand. The reference model retrained after iteration `t` is
/// initialised from `"reference-{t}"`; the pool model uses `"reference-0"`.
pub mod streams {
    pub const REFERENCE: &str = "reference";
    pub const EI: &str = "ei";
    pub const FINAL: &str = "final";
}

/// Repeated environment inference. Iteration `t` infers a partition of the
/// full pool from the current reference model, then retrains the reference
/// by ERM on the majority side. After the loop, the final partition feeds
/// IRM or WERM. `n_iters = 1` with IRM is plain EIIL.
pub fn run_reiil(
    pool: &Dataset,
    val: Option<&Dataset>,
    train_cfg: &TrainConfig,
    irm: &IrmSpec,
    cfg: &ReiilConfig,
    seed: RngSeed,
) -> Result<PipelineTrace> {
    if cfg.n_iters == 0 {
        return Err(Error::InvalidSpec("n_iters must be at least 1".into()));
    }
    let ref_seed = |t: usize| seed.derive(&format!("{}-{t}", streams::REFERENCE));
    let ei_seed = seed.derive(streams::EI);
    let classification = pool.task().is_classification();
    let pool_shuffled = pool.meta().is_shuffled.as_deref().map(fraction_true);
    let mut reference = run_erm(pool, train_cfg, ref_seed(0))?.model;
    let mut iterations = Vec::with_capacity(cfg.n_iters);
    let mut stop = StopReason::Completed;
    let mut last_partition = None;
    for t in 1..=cfg.n_iters {
        let ei = match run_ei_step(&reference, pool, &cfg.ei, ei_seed) {
            Ok(ei) => ei,
            Err(Error::DegenerateGradients) => {
                stop = StopReason::DegenerateGradients { iteration: t };
                break;
            }
            Err(e) => return Err(e),
        };
        let split = match majority_split(pool, &ei.partition) {
            Ok(s) => s,
            Err(Error::MinorityEmpty) => {
                stop = StopReason::MinorityEmpty { iteration: t };
                break;
            }
            Err(e) => return Err(e),
        };
        let reference_pool_accuracy = if classification {
            Some(accuracy(&reference, pool)?)
        } else {
            None
        };
        let next = run_erm(&split.majority, train_cfg, ref_seed(t))?.model;
        let majority_error = evaluate(&next, &split.majority)?.error;
        let minority_error = evaluate(&next, &split.minority)?.error;
        let conjecture = if has_mi_meta(pool) {
            Some(conjecture_gap(pool, &split.majority)?)
        } else {
            None
        };
        iterations.push(IterationRecord {
            iteration: t,
            ei_objective: ei.final_objective,
            majority_env: split.majority_env,
            majority_size: split.majority.len(),
            minority_size: split.minority.len(),
            reference_pool_accuracy,
            majority_error,
            minority_error,
            majority_train_accuracy: classification.then_some(1.0 - majority_error),
            minority_accuracy: classification.then_some(1.0 - minority_error),
            minority_shuffled_fraction: split.minority.meta().is_shuffled.as_deref().map(fraction_true),
            pool_shuffled_fraction: pool_shuffled,
            conjecture_gap: conjecture,
            partition: ei.partition.clone(),
        });
        last_partition = Some(ei.partition);
        reference = next;
    }
    let mut trace = PipelineTrace {
        iterations,
        stop,
        il_kind: cfg.il_kind,
        final_partition: None,
        final_lambda: None,
        final_val_error: None,
        lambda_sweep: Vec::new(),
        final_model: None,
    };
    let Some(partition) = last_partition else {
        return Ok(trace);
    };
    let split = split_by_partition(pool, &partition)?;
    let (e0, e1) = match (&split.env0, &split.env1) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::MinorityEmpty),
    };
    let final_seed = seed.derive(streams::FINAL);
    match cfg.il_kind {
        IlKind::Irm => {
            let fit = run_irm(&[e0, e1], train_cfg, irm, val, final_seed)?;
            trace.final_lambda = Some(fit.lambda);
            trace.final_val_error = fit.val_error;
            trace.lambda_sweep = fit.sweep;
            trace.final_model = Some(fit.model);
        }
        IlKind::Werm => {
            let fit = run_werm(&[e0, e1], train_cfg, final_seed)?;
            trace.final_val_error = val.map(|v| evaluate(&fit.model, v).map(|e| e.error)).transpose()?;
            trace.final_model = Some(fit.model);
        }
    }
    trace.final_partition = Some(partition);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    /// IRM on the given training environments.
    Irm,
    /// Weighted ERM on the given training environments.
    Werm,
    /// IRM after pooling and regrouping by the shuffled flag.
    IrmRegrouped,
    Eiil,
    Reiil,
    Reiwerm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Erm,
        Method::Irm,
        Method::Werm,
        Method::IrmRegrouped,
        Method::Eiil,
        Method::Reiil,
        Method::Reiwerm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irm => "irm",
            Method::Werm => "werm",
            Method::IrmRegrouped => "irm_regrouped",
            Method::Eiil => "eiil",
            Method::Reiil => "reiil",
            Method::Reiwerm => "reiwerm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a method may need from a benchmark.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Dataset>,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub irm: IrmSpec,
    #[serde(default)]
    pub reiil: ReiilConfig,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    /// `None` when environment inference degenerated and no model was fitted.
    pub model: Option<Model>,
    pub lambda: Option<f64>,
    pub train_error: Option<f64>,
    pub val_error: Option<f64>,
    pub test_error: Option<f64>,
    pub trace: Option<PipelineTrace>,
}

pub fn run_method(method: Method, splits: &Splits, cfg: &MethodConfig, seed: RngSeed) -> Result<MethodOutcome> {
    let train_refs: Vec<&Dataset> = splits.train.iter().collect();
    let pool = Dataset::concat(&train_refs)?;
    let val = splits.val.as_ref();
    let (model, lambda, trace) = match method {
        Method::Erm => (Some(run_erm(&pool, &cfg.train, seed)?.model), None, None),
        Method::Irm => {
            let fit = run_irm(&train_refs, &cfg.train, &cfg.irm, val, seed)?;
            (Some(fit.model), Some(fit.lambda), None)
        }
        Method::Werm => (Some(run_werm(&train_refs, &cfg.train, seed)?.model), None, None),
        Method::IrmRegrouped => {
            if splits.train.len() != 2 {
                return Err(Error::InvalidSpec("regrouping needs exactly two training environments".into()));
            }
            let r = regroup_shuffled(&splits.train[0], &splits.train[1])?;
            let (a, b) = match (r.env0, r.env1) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::MinorityEmpty),
            };
            let fit = run_irm(&[&a, &b], &cfg.train, &cfg.irm, val, seed)?;
            (Some(fit.model), Some(fit.lambda), None)
        }
        Method::Eiil | Method::Reiil | Method::Reiwerm => {
            let rcfg = ReiilConfig {
                n_iters: if method == Method::Eiil { 1 } else { cfg.reiil.n_iters },
                il_kind: if method == Method::Reiwerm { IlKind::Werm } else { IlKind::Irm },
                ..cfg.reiil.clone()
            };
            let mut trace = run_reiil(&pool, val, &cfg.train, &cfg.irm, &rcfg, seed)?;
            let model = trace.final_model.take();
            (model, trace.final_lambda, Some(trace))
        }
    };
    let err = |d: &Dataset| model.as_ref().map(|m| evaluate(m, d).map(|e| e.error)).transpose();
    Ok(MethodOutcome {
        method,
        lambda,
        train_error: err(&pool)?,
        val_error: val.map(err).transpose()?.flatten(),
        test_error: err(&splits.test)?,
        model,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, Meta, Task};
    use crate::models::LinearModel;
    use ndarray::array;

    fn toy_binary() -> Dataset {
        Dataset::new(
            array![[-2.0], [-1.0], [1.0], [2.0]],
            Labels::Class(vec![0, 0, 1, 1]),
            Task::Binary,
            Meta::default(),
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelSpec::Mlp { hidden: vec![4] },
            optim: OptimSpec {
                lr: 0.05,
                steps: 200,
                l2: 0.0,
                ..OptimSpec::default()
            },
        }
    }

    #[test]
    fn erm_fits_separable_data() {
        let d = toy_binary();
        let fit = run_erm(&d, &small_cfg(), RngSeed(1)).unwrap();
        assert_eq!(accuracy(&fit.model, &d).unwrap(), 1.0);
        let again = run_erm(&d, &small_cfg(), RngSeed(1)).unwrap();
        assert_eq!(fit.loss_trace, again.loss_trace);
    }

    #[test]
    fn select_prefers_lowest_and_first_on_ties() {
        let v = Dataset::new(array![[1.0]], Labels::Real(vec![1.0]), Task::Regression, Meta::default()).unwrap();
        let m = |w: f64| Model::Linear(LinearModel::from_weights(vec![w], None));
        let (c, _, e) = select_model(vec![("a", m(0.0)), ("b", m(1.0)), ("c", m(2.0))], &v).unwrap();
        assert_eq!((c, e), ("b", 0.0));
        let (c, _, _) = select_model(vec![("a", m(0.0)), ("b", m(2.0))], &v).unwrap();
        assert_eq!(c, "a");
        assert_eq!(select_model(vec![("only", m(5.0))], &v).unwrap().0, "only");
        assert!(select_model::<()>(vec![], &v).is_err());
    }

    #[test]
    fn sweep_without_validation_is_rejected() {
        let d = toy_binary();
        let cfg = small_cfg();
        assert!(run_irm(&[&d, &d], &cfg, &IrmSpec::default(), None, RngSeed(0)).is_err());
        assert!(run_irm(&[&d], &cfg, &IrmSpec::single(1.0), None, RngSeed(0)).is_err());
    }

    #[test]
    fn zero_lambda_irm_on_halves_matches_erm() {
        let d = toy_binary();
        let a = d.select(&[0, 2]).unwrap();
        let b = d.select(&[1, 3]).unwrap();
        let cfg = small_cfg();
        let irm = train_irm(&[&a, &b], &cfg, 0.0, 0, RngSeed(3)).unwrap();
        let pooled = Dataset::concat(&[&a, &b]).unwrap();
        let erm = run_erm(&pooled, &cfg, RngSeed(3)).unwrap();
        // Σ_e R^e = 2·R_pool for equal halves; Adam is invariant to the factor
        for (x, y) in irm.loss_trace.iter().zip(&erm.loss_trace) {
            assert!((x - 2.0 * y).abs() < 1e-6);
        }
        assert_eq!(irm.model.params().len(), erm.model.params().len());
        for (p, q) in irm.model.params().iter().zip(erm.model.params()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_reference_is_degenerate() {
        // a perfect regressor has g_i = 2ŷ(ŷ − y) = 0 everywhere
        let d = Dataset::new(
            array![[1.0], [2.0], [3.0]],
            Labels::Real(vec![1.0, 2.0, 3.0]),
            Task::Regression,
            Meta::default(),
        )
        .unwrap();
        let m = Model::Linear(LinearModel::from_weights(vec![1.0], None));
        assert!(matches!(
            run_ei_step(&m, &d, &EiConfig::default(), RngSeed(0)),
            Err(Error::DegenerateGradients)
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}

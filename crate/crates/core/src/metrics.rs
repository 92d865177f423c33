//! Evaluation and diagnostics.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels, Task};
use crate::datagen::SemGroundTruth;
use crate::error::{Error, Result};
use crate::models::{LinearModel, Model};
use crate::pipelines::PipelineTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvError {
    pub env: i32,
    pub error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean squared error (regression) or `1 − accuracy` (classification).
    pub error: f64,
    pub count: usize,
    /// Breakdown by `env_id`, present when the dataset carries it.
    pub per_env: Vec<EnvError>,
}

/// Predicted class per row: sign of the logit for binary, first argmax otherwise.
pub fn predict_classes(outputs: &Array2<f64>, task: Task) -> Vec<u32> {
    match task {
        Task::Binary => outputs.column(0).iter().map(|&z| u32::from(z > 0.0)).collect(),
        _ => outputs
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect(),
    }
}

/// Per-row error: squared residual, or 0/1 misclassification.
pub fn per_sample_error(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    let out = model.forward(data.features())?;
    if out.ncols() != data.task().output_dim() {
        return Err(Error::DimensionMismatch {
            what: "model outputs",
            expected: data.task().output_dim(),
            got: out.ncols(),
        });
    }
    Ok(match data.labels() {
        Labels::Real(y) => out.column(0).iter().zip(y).map(|(p, y)| (p - y).powi(2)).collect(),
        Labels::Class(y) => predict_classes(&out, data.task())
            .iter()
            .zip(y)
            .map(|(p, y)| if p == y { 0.0 } else { 1.0 })
            .collect(),
    })
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let errs = per_sample_error(model, data)?;
    let error = errs.iter().sum::<f64>() / errs.len() as f64;
    let mut per_env = Vec::new();
    if let Some(env) = &data.meta().env_id {
        let mut acc: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
        for (e, v) in env.iter().zip(&errs) {
            let slot = acc.entry(*e).or_default();
            slot.0 += v;
            slot.1 += 1;
        }
        per_env = acc
            .into_iter()
            .map(|(env, (s, c))| EnvError {
                env,
                error: s / c as f64,
                count: c,
            })
            .collect();
    }
    Ok(Evaluation {
        error,
        count: errs.len(),
        per_env,
    })
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if !data.task().is_classification() {
        return Err(Error::TaskMismatch("accuracy needs a classification task".into()));
    }
    Ok(1.0 - evaluate(model, data)?.error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalErrorReport {
    /// Mean squared deviation of causal-coordinate weights from the true causal weights.
    pub ce: f64,
    /// Mean squared deviation of anti-causal-coordinate weights from zero.
    pub nce: Option<f64>,
}

/// Causal and non-causal weight errors of a linear model. Scrambled
/// features are first mapped back to `[X; Z]` coordinates.
pub fn causal_errors(model: &LinearModel, truth: &SemGroundTruth) -> Result<CausalErrorReport> {
    let d = truth.w_causal.len();
    if model.weights.len() != 2 * d {
        return Err(Error::DimensionMismatch {
            what: "linear model weights",
            expected: 2 * d,
            got: model.weights.len(),
        });
    }
    // prediction w·(S v) = (Sᵀ w)·v
    let raw = truth.scramble.t().dot(&model.weights);
    let ce = (0..d).map(|i| (raw[i] - truth.w_causal[i]).powi(2)).sum::<f64>() / d as f64;
    let nce = (0..d).map(|i| raw[d + i].powi(2)).sum::<f64>() / d as f64;
    Ok(CausalErrorReport { ce, nce: Some(nce) })
}

/// Plug-in mutual information (nats) between two discrete label sequences.
pub fn mutual_info_discrete(a: &[i32], b: &[i32]) -> f64 {
    assert_eq!(a.len(), b.len(), "label sequences differ in length");
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    let mut pa: BTreeMap<i32, usize> = BTreeMap::new();
    let mut pb: BTreeMap<i32, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = pa[&x] as f64 / n;
            let py = pb[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    if mi < 1e-12 {
        0.0
    } else {
        mi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiDiagnostics {
    pub i_yz: f64,
    pub i_yx: f64,
    pub gap: f64,
}

/// `I(Y;Z)` and `I(Y;X)` from labels, `spurious_id` and `causal_id`.
pub fn mi_diagnostics(data: &Dataset) -> Result<MiDiagnostics> {
    let y: Vec<i32> = data.class_labels()?.iter().map(|&c| c as i32).collect();
    let i_yz = mutual_info_discrete(&y, data.spurious_id()?);
    let i_yx = mutual_info_discrete(&y, data.causal_id()?);
    Ok(MiDiagnostics {
        i_yz,
        i_yx,
        gap: i_yz - i_yx,
    })
}

/// `[I_sub(Y;Z) − I_sub(Y;X)] − [I_full(Y;Z) − I_full(Y;X)]`; positive when
/// the subset couples label and spurious feature more tightly than the full set.
pub fn conjecture_gap(full: &Dataset, subset: &Dataset) -> Result<f64> {
    Ok(mi_diagnostics(subset)?.gap - mi_diagnostics(full)?.gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub iteration: usize,
    pub minority_ref_accuracy: f64,
    pub minority_shuffled_fraction: f64,
}

/// Per-iteration minority accuracy and shuffled fraction from a REIIL trace.
pub fn minority_dynamics(trace: &PipelineTrace) -> Result<Vec<DynamicsRow>> {
    if trace.iterations.is_empty() {
        return Err(Error::InvalidSpec("trace has no iterations".into()));
    }
    trace
        .iterations
        .iter()
        .map(|r| {
            Ok(DynamicsRow {
                iteration: r.iteration,
                minority_ref_accuracy: r
                    .minority_accuracy
                    .ok_or_else(|| Error::TaskMismatch("minority accuracy needs a classification task".into()))?,
                minority_shuffled_fraction: r
                    .minority_shuffled_fraction
                    .ok_or(Error::MissingMetadata("is_shuffled"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Meta;
    use crate::models::{Dense, MlpModel};
    use ndarray::{array, Array1};

    #[test]
    fn mi_examples() {
        let a = [0, 1, 0, 1];
        assert!((mutual_info_discrete(&a, &a) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(mutual_info_discrete(&a, &[3, 3, 3, 3]), 0.0);
        // joint [[0.4, 0.1], [0.1, 0.4]] in counts of 10
        let x = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let y = [0, 0, 0, 0, 1, 0, 1, 1, 1, 1];
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((mutual_info_discrete(&x, &y) - expected).abs() < 1e-12);
        assert!((expected - 0.1927).abs() < 1e-4);
        assert_eq!(mutual_info_discrete(&x, &y), mutual_info_discrete(&y, &x));
    }

    #[test]
    fn causal_error_examples() {
        let truth = SemGroundTruth::unscrambled(vec![2.0], vec![0.5]);
        let m = LinearModel::from_weights(vec![1.0, 3.0], None);
        let r = causal_errors(&m, &truth).unwrap();
        assert_eq!((r.ce, r.nce), (1.0, Some(9.0)));
        let w = vec![0.3, -1.2, 0.7];
        let truth = SemGroundTruth::unscrambled(w.clone(), vec![0.0; 3]);
        let exact = LinearModel::from_weights([w.clone(), vec![0.0; 3]].concat(), None);
        let r = causal_errors(&exact, &truth).unwrap();
        assert_eq!((r.ce, r.nce), (0.0, Some(0.0)));
        let doubled = LinearModel::from_weights([w.clone(), w.clone()].concat(), None);
        let r = causal_errors(&doubled, &truth).unwrap();
        let direct = w.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((r.nce.unwrap() - direct).abs() < 1e-15);
        assert!(causal_errors(&LinearModel::from_weights(vec![0.0; 5], None), &truth).is_err());
    }

    #[test]
    fn constant_classifier_on_balanced_binary() {
        let data = Dataset::new(
            array![[0.0], [1.0], [2.0], [3.0]],
            Labels::Class(vec![0, 1, 0, 1]),
            Task::Binary,
            Meta::default(),
        )
        .unwrap();
        let m = Model::Mlp(
            MlpModel::from_layers(vec![Dense {
                weight: array![[0.0]],
                bias: Array1::from(vec![1.0]),
            }])
            .unwrap(),
        );
        assert_eq!(evaluate(&m, &data).unwrap().error, 0.5);
    }

    #[test]
    fn breakdown_recombines() {
        let data = Dataset::new(
            array![[0.0], [1.0], [2.0], [3.0], [4.0]],
            Labels::Real(vec![0.0, 1.5, 2.0, 2.0, 4.0]),
            Task::Regression,
            Meta {
                env_id: Some(vec![0, 0, 1, 1, 1]),
                ..Meta::default()
            },
        )
        .unwrap();
        let m = Model::Linear(LinearModel::from_weights(vec![1.0], None));
        let e = evaluate(&m, &data).unwrap();
        let recombined: f64 = e.per_env.iter().map(|p| p.error * p.count as f64).sum::<f64>() / 5.0;
        assert!((recombined - e.error).abs() < 1e-15);
        assert_eq!(e.per_env.len(), 2);
        let perfect = Model::Linear(LinearModel::from_weights(vec![1.0], None));
        let exact = Dataset::new(array![[1.0], [2.0]], Labels::Real(vec![1.0, 2.0]), Task::Regression, Meta::default()).unwrap();
        assert_eq!(evaluate(&perfect, &exact).unwrap().error, 0.0);
    }
}

//! Losses, the per-sample scalar-multiplier gradient, the IRM penalty, IRMv1
//! and the environment-balanced (WERM) risk.
//!
//! All objectives here are functions of the model outputs only; parameter
//! gradients come from backpropagating `∂objective/∂outputs` through the model.
//!
//! The per-sample multiplier gradient is `g_i = ∂/∂w l(w·z_i, y_i)` at `w = 1`,
//! which for any loss equals `z_i · ∇l(z_i)`:
//!
//! | task        | loss                  | `g_i`                       |
//! |-------------|-----------------------|-----------------------------|
//! | regression  | `(ŷ − y)²`            | `2ŷ(ŷ − y)`                 |
//! | binary      | logistic on logit `z` | `z(σ(z) − y)`               |
//! | multiclass  | cross-entropy         | `z · (softmax(z) − onehot)` |

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels, Task};
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleStats {
    pub losses: Vec<f64>,
    pub w_grads: Vec<f64>,
}

impl PerSampleStats {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

/// Per-sample loss and multiplier gradient together with their derivatives
/// with respect to the outputs.
pub(crate) struct SampleTerms {
    pub loss: Vec<f64>,
    pub dloss: Array2<f64>,
    pub g: Vec<f64>,
    pub dg: Array2<f64>,
}

fn check_shapes(outputs: &Array2<f64>, labels: &Labels, task: Task) -> Result<()> {
    if outputs.ncols() != task.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "model outputs",
            expected: task.output_dim(),
            got: outputs.ncols(),
        });
    }
    if outputs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: outputs.nrows(),
            got: labels.len(),
        });
    }
    match (task, labels) {
        (Task::Regression, Labels::Real(_)) => Ok(()),
        (Task::Binary | Task::Multiclass(_), Labels::Class(_)) => Ok(()),
        _ => Err(Error::TaskMismatch(format!("labels do not fit task {task:?}"))),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn softmax_row(z: &[f64], p: &mut [f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for (pk, &zk) in p.iter_mut().zip(z.iter()) {
        *pk = (zk - m).exp();
        s += *pk;
    }
    p.iter_mut().for_each(|pk| *pk /= s);
    m + s.ln()
}

/// `with_penalty = false` skips `g` and `dg` (left empty).
pub(crate) fn sample_terms(outputs: &Array2<f64>, labels: &Labels, task: Task, with_penalty: bool) -> Result<SampleTerms> {
    check_shapes(outputs, labels, task)?;
    let (n, k) = outputs.dim();
    let standard = outputs.as_standard_layout();
    let z_all = standard.as_slice().expect("standard layout");
    let mut loss = vec![0.0; n];
    let mut dloss = vec![0.0; n * k];
    let (mut g, mut dg) = if with_penalty {
        (vec![0.0; n], vec![0.0; n * k])
    } else {
        (Vec::new(), Vec::new())
    };
    match (task, labels) {
        (Task::Regression, Labels::Real(y)) => {
            for i in 0..n {
                let z = z_all[i];
                let r = z - y[i];
                loss[i] = r * r;
                dloss[i] = 2.0 * r;
                if with_penalty {
                    g[i] = 2.0 * z * r;
                    dg[i] = 4.0 * z - 2.0 * y[i];
                }
            }
        }
        (Task::Binary, Labels::Class(y)) => {
            for i in 0..n {
                let z = z_all[i];
                let t = f64::from(y[i]);
                let s = sigmoid(z);
                loss[i] = softplus(z) - t * z;
                dloss[i] = s - t;
                if with_penalty {
                    g[i] = z * (s - t);
                    dg[i] = s - t + z * s * (1.0 - s);
                }
            }
        }
        (Task::Multiclass(_), Labels::Class(y)) => {
            let mut p = vec![0.0; k];
            for i in 0..n {
                let z = &z_all[i * k..(i + 1) * k];
                let yi = y[i] as usize;
                let lse = softmax_row(z, &mut p);
                loss[i] = lse - z[yi];
                let dl = &mut dloss[i * k..(i + 1) * k];
                dl.copy_from_slice(&p);
                dl[yi] -= 1.0;
                if with_penalty {
                    let zbar: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
                    g[i] = zbar - z[yi];
                    for c in 0..k {
                        dg[i * k + c] = p[c] * (1.0 + z[c] - zbar);
                    }
                    dg[i * k + yi] -= 1.0;
                }
            }
        }
        _ => unreachable!("checked by check_shapes"),
    }
    let shape = |v: Vec<f64>, rows: usize| Array2::from_shape_vec((rows, k), v).expect("row-major buffer");
    Ok(SampleTerms {
        loss,
        dloss: shape(dloss, n),
        dg: shape(dg, if with_penalty { n } else { 0 }),
        g,
    })
}

pub fn per_sample_stats(outputs: &Array2<f64>, labels: &Labels, task: Task) -> Result<PerSampleStats> {
    let t = sample_terms(outputs, labels, task, true)?;
    Ok(PerSampleStats {
        losses: t.loss,
        w_grads: t.g,
    })
}

/// How the soft environment risk is normalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskNormalization {
    /// Fixed `1/N` over the whole dataset.
    #[default]
    SampleCount,
    /// `1/Σq` (soft count of the environment).
    SoftCount,
}

/// Gradient of the soft environment risk with respect to the multiplier:
/// `(1/N) Σ q_i g_i` (or divided by `Σ q_i` under [`RiskNormalization::SoftCount`]).
pub fn soft_risk_grad(g: &[f64], q: &[f64], norm: RiskNormalization) -> f64 {
    let s: f64 = g.iter().zip(q).map(|(g, q)| g * q).sum();
    match norm {
        RiskNormalization::SampleCount => s / g.len() as f64,
        RiskNormalization::SoftCount => {
            let mass: f64 = q.iter().sum();
            if mass > 0.0 {
                s / mass
            } else {
                0.0
            }
        }
    }
}

/// `((1/N) Σ q_i g_i)²`.
pub fn irm_penalty(stats: &PerSampleStats, q: &[f64]) -> Result<f64> {
    irm_penalty_with(stats, q, RiskNormalization::SampleCount)
}

pub fn irm_penalty_with(stats: &PerSampleStats, q: &[f64], norm: RiskNormalization) -> Result<f64> {
    if q.len() != stats.len() {
        return Err(Error::DimensionMismatch {
            what: "environment weights",
            expected: stats.len(),
            got: q.len(),
        });
    }
    Ok(soft_risk_grad(&stats.w_grads, q, norm).powi(2))
}

/// Mean over environments of each environment's mean loss.
pub fn werm_risk(env_losses: &[&[f64]]) -> Result<f64> {
    if env_losses.is_empty() {
        return Err(Error::EmptyEnvironment(0));
    }
    let mut total = 0.0;
    for (e, l) in env_losses.iter().enumerate() {
        if l.is_empty() {
            return Err(Error::EmptyEnvironment(e));
        }
        total += l.iter().sum::<f64>() / l.len() as f64;
    }
    Ok(total / env_losses.len() as f64)
}

/// Per-sample weights under which a weighted mean equals [`werm_risk`].
pub fn werm_weights(env_sizes: &[usize]) -> Result<Vec<f64>> {
    let e = env_sizes.len() as f64;
    let mut w = Vec::with_capacity(env_sizes.iter().sum());
    for (i, &n) in env_sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyEnvironment(i));
        }
        w.extend(std::iter::repeat_n(1.0 / (e * n as f64), n));
    }
    Ok(w)
}

/// A differentiable training objective over model outputs.
pub trait Objective {
    /// Objective value and its gradient with respect to `outputs`.
    fn evaluate(&self, step: usize, outputs: &Array2<f64>) -> Result<(f64, Array2<f64>)>;

    /// Factor applied to the whole training loss (including L2) at `step`.
    fn scale(&self, _step: usize) -> f64 {
        1.0
    }
}

/// `Σ w_i l_i / Σ w_i`.
pub struct WeightedRisk<'a> {
    pub labels: &'a Labels,
    pub task: Task,
    pub weights: Vec<f64>,
}

impl<'a> WeightedRisk<'a> {
    pub fn new(labels: &'a Labels, task: Task, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "sample weights",
                expected: labels.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidSpec(
                "sample weights must be non-negative and not all zero".into(),
            ));
        }
        Ok(WeightedRisk { labels, task, weights })
    }

    pub fn uniform(labels: &'a Labels, task: Task) -> Self {
        WeightedRisk {
            labels,
            task,
            weights: vec![1.0; labels.len()],
        }
    }
}

impl Objective for WeightedRisk<'_> {
    fn evaluate(&self, _step: usize, outputs: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let t = sample_terms(outputs, self.labels, self.task, false)?;
        let total: f64 = self.weights.iter().sum();
        let loss = t.loss.iter().zip(&self.weights).map(|(l, w)| l * w).sum::<f64>() / total;
        let mut d = t.dloss;
        let k = d.ncols();
        let buf = d.as_slice_mut().expect("fresh array");
        for (row, w) in buf.chunks_exact_mut(k).zip(&self.weights) {
            let f = w / total;
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok((loss, d))
    }
}

/// IRMv1 over contiguous environment blocks:
/// `Σ_e R^e + λ (∂R^e/∂w)²`, with the penalty weight held at 1 during the
/// first `anneal_steps` steps and the whole loss divided by λ afterwards
/// (when λ > 1).
pub struct IrmObjective<'a> {
    pub labels: &'a Labels,
    pub task: Task,
    pub groups: Vec<Range<usize>>,
    pub lambda: f64,
    pub anneal_steps: usize,
}

impl IrmObjective<'_> {
    pub fn penalty_weight(&self, step: usize) -> f64 {
        if step < self.anneal_steps {
            1.0
        } else {
            self.lambda
        }
    }
}

impl Objective for IrmObjective<'_> {
    fn evaluate(&self, step: usize, outputs: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let t = sample_terms(outputs, self.labels, self.task, true)?;
        let lam = self.penalty_weight(step);
        let k = outputs.ncols();
        let mut d = Array2::zeros(outputs.raw_dim());
        let out = d.as_slice_mut().expect("fresh array");
        let dloss = t.dloss.as_slice().expect("fresh array");
        let dg = t.dg.as_slice().expect("fresh array");
        let mut total = 0.0;
        for (e, r) in self.groups.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::EmptyEnvironment(e));
            }
            let ne = r.len() as f64;
            let risk = t.loss[r.clone()].iter().sum::<f64>() / ne;
            let grad_w = t.g[r.clone()].iter().sum::<f64>() / ne;
            total += risk + lam * grad_w * grad_w;
            let (a, b) = (1.0 / ne, lam * 2.0 * grad_w / ne);
            for j in r.start * k..r.end * k {
                out[j] = a * dloss[j] + b * dg[j];
            }
        }
        Ok((total, d))
    }

    fn scale(&self, step: usize) -> f64 {
        let lam = self.penalty_weight(step);
        if lam > 1.0 {
            1.0 / lam
        } else {
            1.0
        }
    }
}

/// Stacks environments and returns the pooled dataset with each environment's row range.
pub fn stack_environments(envs: &[&Dataset]) -> Result<(Dataset, Vec<Range<usize>>)> {
    let mut ranges = Vec::with_capacity(envs.len());
    let mut start = 0;
    for (e, d) in envs.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::EmptyEnvironment(e));
        }
        ranges.push(start..start + d.len());
        start += d.len();
    }
    Ok((Dataset::concat(envs)?, ranges))
}

/// IRMv1 objective value and parameter gradient for `model` (no L2, no annealing).
pub fn irmv1_objective(envs: &[&Dataset], model: &Model, lambda: f64) -> Result<(f64, Vec<f64>)> {
    if envs.is_empty() {
        return Err(Error::EmptyEnvironment(0));
    }
    let (pool, groups) = stack_environments(envs)?;
    let obj = IrmObjective {
        labels: pool.labels(),
        task: pool.task(),
        groups,
        lambda,
        anneal_steps: 0,
    };
    model.objective_grad(pool.features(), &obj, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats(g: Vec<f64>) -> PerSampleStats {
        PerSampleStats {
            losses: vec![0.0; g.len()],
            w_grads: g,
        }
    }

    #[test]
    fn binary_zero_logit_has_zero_multiplier_grad() {
        let s = per_sample_stats(&array![[0.0]], &Labels::Class(vec![1]), Task::Binary).unwrap();
        assert_eq!(s.w_grads[0], 0.0);
        assert!((s.losses[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn binary_ln3_closed_form() {
        let z = 3f64.ln();
        let s = per_sample_stats(&array![[z]], &Labels::Class(vec![0]), Task::Binary).unwrap();
        assert!((s.w_grads[0] - z * 0.75).abs() < 1e-12);
        assert!((s.w_grads[0] - 0.8240).abs() < 1e-4);
    }

    #[test]
    fn regression_terms() {
        let s = per_sample_stats(&array![[3.0]], &Labels::Real(vec![1.0]), Task::Regression).unwrap();
        assert_eq!(s.losses[0], 4.0);
        assert_eq!(s.w_grads[0], 12.0);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(irm_penalty(&stats(vec![1.0, -1.0]), &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(irm_penalty(&stats(vec![2.0]), &[1.0]).unwrap(), 4.0);
        assert!(irm_penalty(&stats(vec![2.0]), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn soft_count_normalisation() {
        let p = irm_penalty_with(&stats(vec![2.0, 4.0]), &[1.0, 0.0], RiskNormalization::SoftCount)
            .unwrap();
        assert_eq!(p, 4.0);
    }

    #[test]
    fn werm_examples() {
        assert_eq!(werm_risk(&[&[2.0], &[0.0, 0.0, 0.0]]).unwrap(), 1.0);
        let a = [1.0, 3.0];
        let b = [2.0, 0.0];
        let global = (1.0 + 3.0 + 2.0 + 0.0) / 4.0;
        assert_eq!(werm_risk(&[&a, &b]).unwrap(), global);
        assert!(matches!(werm_risk(&[&a, &[]]), Err(Error::EmptyEnvironment(1))));
        let dup = [1.0, 3.0, 1.0, 3.0];
        assert_eq!(werm_risk(&[&dup, &b]).unwrap(), werm_risk(&[&a, &b]).unwrap());
    }

    #[test]
    fn werm_weights_match_risk() {
        let losses = [2.0, 0.0, 0.0, 0.0];
        let w = werm_weights(&[1, 3]).unwrap();
        let weighted: f64 = losses.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() / w.iter().sum::<f64>();
        assert!((weighted - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_risk_rejects_bad_weights() {
        let y = Labels::Real(vec![0.0, 1.0]);
        assert!(WeightedRisk::new(&y, Task::Regression, vec![0.0, 0.0]).is_err());
        assert!(WeightedRisk::new(&y, Task::Regression, vec![-1.0, 2.0]).is_err());
        assert!(WeightedRisk::new(&y, Task::Regression, vec![1.0]).is_err());
    }
}

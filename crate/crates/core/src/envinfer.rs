//! Environment inference: split a pool into two environments that maximally
//! violate invariance for a fixed reference model.
//!
//! With `G_e = (1/N) Σ_i q_i(e) g_i` the objective is
//! `C = G_1² + G_2²`, `q_i(2) = 1 − q_i(1)`. Since `G_1 + G_2` is fixed, `C`
//! is convex in `G_1` and peaks at an extreme of its range: all positive
//! `g_i` on one side. [`sign_partition`] returns that vertex directly;
//! [`ei_optimize`] reaches it by gradient ascent on sigmoid logits, and
//! [`exhaustive_ei`] checks both on small inputs.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{split_by_partition, Dataset, EnvPartition};
use crate::error::{Error, Result};
use crate::models::{OptimSpec, OptimizerState};
use crate::objectives::{soft_risk_grad, PerSampleStats, RiskNormalization};
use crate::rng::RngSeed;

fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    0.01
}
fn default_init_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EiConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Std of the initial assignment logits.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub normalization: RiskNormalization,
}

impl Default for EiConfig {
    fn default() -> Self {
        EiConfig {
            steps: default_steps(),
            lr: default_lr(),
            init_std: default_init_std(),
            normalization: RiskNormalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EiResult {
    pub partition: EnvPartition,
    /// Objective after every accepted ascent step (first entry: initial value).
    pub objective_trace: Vec<f64>,
    /// Objective of the hardened partition.
    pub final_objective: f64,
}

/// `C` for soft assignments of environment 1.
pub fn ei_objective(g: &[f64], q: &[f64], norm: RiskNormalization) -> f64 {
    let q2: Vec<f64> = q.iter().map(|q| 1.0 - q).collect();
    soft_risk_grad(g, q, norm).powi(2) + soft_risk_grad(g, &q2, norm).powi(2)
}

/// `C` for a hard split, summing in index order.
pub fn hard_ei_objective(g: &[f64], hard: &[u8], norm: RiskNormalization) -> f64 {
    let (mut s0, mut s1) = (0.0, 0.0);
    let (mut n0, mut n1) = (0usize, 0usize);
    for (&gi, &h) in g.iter().zip(hard) {
        if h == 1 {
            s1 += gi;
            n1 += 1;
        } else {
            s0 += gi;
            n0 += 1;
        }
    }
    let (d0, d1) = match norm {
        RiskNormalization::SampleCount => (g.len() as f64, g.len() as f64),
        RiskNormalization::SoftCount => (n0.max(1) as f64, n1.max(1) as f64),
    };
    (s1 / d1).powi(2) + (s0 / d0).powi(2)
}

fn ei_gradient(g: &[f64], q: &[f64], norm: RiskNormalization, out: &mut [f64]) {
    let n = g.len() as f64;
    let q2: Vec<f64> = q.iter().map(|q| 1.0 - q).collect();
    let g1 = soft_risk_grad(g, q, norm);
    let g2 = soft_risk_grad(g, &q2, norm);
    match norm {
        RiskNormalization::SampleCount => {
            let c = 2.0 * (g1 - g2) / n;
            for (o, gi) in out.iter_mut().zip(g) {
                *o = c * gi;
            }
        }
        RiskNormalization::SoftCount => {
            let m1: f64 = q.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            let m2: f64 = q2.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            for (o, gi) in out.iter_mut().zip(g) {
                *o = 2.0 * g1 * (gi - g1) / m1 - 2.0 * g2 * (gi - g2) / m2;
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Maximises `C` over soft assignments `q = sigmoid(v)` by full-batch Adam
/// ascent on `v`. Steps that would lower the objective are rejected and
/// halve the step size, so the trace never decreases.
pub fn ei_optimize(stats: &PerSampleStats, cfg: &EiConfig, seed: RngSeed) -> Result<EiResult> {
    let g = &stats.w_grads;
    let n = g.len();
    if n < 2 {
        return Err(Error::InvalidSpec("environment inference needs at least two samples".into()));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateGradients);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec("non-finite per-sample gradient".into()));
    }
    let norm = cfg.normalization;
    let mut rng = seed.rng();
    let init = Normal::new(0.0, cfg.init_std.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut v: Vec<f64> = (0..n).map(|_| init.sample(&mut rng)).collect();
    let mut q: Vec<f64> = v.iter().map(|&x| sigmoid(x)).collect();
    let mut opt = OptimizerState::adam(
        n,
        &OptimSpec {
            lr: cfg.lr,
            ..OptimSpec::default()
        },
    );
    let mut current = ei_objective(g, &q, norm);
    let mut trace = vec![current];
    let mut dq = vec![0.0; n];
    let mut step_grad = vec![0.0; n];
    for _ in 0..cfg.steps {
        ei_gradient(g, &q, norm, &mut dq);
        for i in 0..n {
            // ascent: Adam descends, so feed the negated gradient through the sigmoid
            step_grad[i] = -dq[i] * q[i] * (1.0 - q[i]);
        }
        let saved = (v.clone(), opt.clone());
        opt.update(&mut v, &step_grad);
        let cand_q: Vec<f64> = v.iter().map(|&x| sigmoid(x)).collect();
        let cand = ei_objective(g, &cand_q, norm);
        if cand >= current {
            current = cand;
            q = cand_q;
            trace.push(current);
        } else {
            let lr = opt.lr * 0.5;
            (v, opt) = saved;
            opt.lr = lr;
            if opt.lr < 1e-12 {
                break;
            }
        }
    }
    let partition = EnvPartition::from_soft(q)?;
    let final_objective = hard_ei_objective(g, partition.hard(), norm);
    Ok(EiResult {
        partition,
        objective_trace: trace,
        final_objective,
    })
}

/// Environment 1 = samples with positive multiplier gradient.
pub fn sign_partition(stats: &PerSampleStats) -> EnvPartition {
    EnvPartition::from_hard(stats.w_grads.iter().map(|&g| u8::from(g > 0.0)).collect())
        .expect("labels are 0 or 1")
}

pub const EXHAUSTIVE_LIMIT: usize = 20;

/// Enumerates all `2^N` hard splits; returns the first maximiser and its objective.
pub fn exhaustive_ei(stats: &PerSampleStats) -> Result<(EnvPartition, f64)> {
    exhaustive_ei_with(stats, RiskNormalization::SampleCount)
}

pub fn exhaustive_ei_with(stats: &PerSampleStats, norm: RiskNormalization) -> Result<(EnvPartition, f64)> {
    let g = &stats.w_grads;
    let n = g.len();
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge(n));
    }
    let mut hard = vec![0u8; n];
    let mut best = (0u64, f64::NEG_INFINITY);
    for mask in 0..(1u64 << n) {
        for (i, h) in hard.iter_mut().enumerate() {
            *h = ((mask >> i) & 1) as u8;
        }
        let c = hard_ei_objective(g, &hard, norm);
        if c > best.1 {
            best = (mask, c);
        }
    }
    let hard = (0..n).map(|i| ((best.0 >> i) & 1) as u8).collect();
    Ok((EnvPartition::from_hard(hard)?, best.1))
}

#[derive(Debug, Clone)]
pub struct MajoritySplit {
    pub majority: Dataset,
    pub minority: Dataset,
    /// Environment id (0 or 1) of the majority side.
    pub majority_env: u8,
}

/// Larger environment first; ties go to environment 0.
pub fn majority_split(data: &Dataset, p: &EnvPartition) -> Result<MajoritySplit> {
    let split = split_by_partition(data, p)?;
    match (split.env0, split.env1) {
        (Some(e0), Some(e1)) => Ok(if e0.len() >= e1.len() {
            MajoritySplit {
                majority: e0,
                minority: e1,
                majority_env: 0,
            }
        } else {
            MajoritySplit {
                majority: e1,
                minority: e0,
                majority_env: 1,
            }
        }),
        _ => Err(Error::MinorityEmpty),
    }
}

/// Partition as CSV: `index,soft_q,hard[,is_shuffled][,spurious_id]`.
pub fn partition_csv(p: &EnvPartition, data: Option<&Dataset>) -> String {
    let shuffled = data.and_then(|d| d.meta().is_shuffled.as_deref());
    let spurious = data.and_then(|d| d.meta().spurious_id.as_deref());
    let mut out = String::from("index,soft_q,hard");
    if shuffled.is_some() {
        out.push_str(",is_shuffled");
    }
    if spurious.is_some() {
        out.push_str(",spurious_id");
    }
    out.push('\n');
    for (i, (q, h)) in p.soft_q().iter().zip(p.hard()).enumerate() {
        let _ = write!(out, "{i},{q},{h}");
        if let Some(s) = shuffled {
            let _ = write!(out, ",{}", u8::from(s[i]));
        }
        if let Some(z) = spurious {
            let _ = write!(out, ",{}", z[i]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, Meta, Task};
    use ndarray::Array2;

    fn stats(g: &[f64]) -> PerSampleStats {
        PerSampleStats {
            losses: vec![0.0; g.len()],
            w_grads: g.to_vec(),
        }
    }

    #[test]
    fn zero_gradients_are_degenerate() {
        assert!(matches!(
            ei_optimize(&stats(&[0.0, 0.0, 0.0]), &EiConfig::default(), RngSeed(0)),
            Err(Error::DegenerateGradients)
        ));
        assert_eq!(ei_objective(&[0.0, 0.0], &[0.3, 0.9], RiskNormalization::SampleCount), 0.0);
    }

    #[test]
    fn two_sample_optimum() {
        let s = stats(&[2.0, -1.0]);
        let (_, best) = exhaustive_ei(&s).unwrap();
        assert_eq!(best, 1.25);
        let r = ei_optimize(&s, &EiConfig::default(), RngSeed(4)).unwrap();
        assert!(r.final_objective >= 1.25 * (1.0 - 1e-3));
        assert!(r.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn single_sample_exhaustive() {
        let (_, best) = exhaustive_ei(&stats(&[3.0])).unwrap();
        assert_eq!(best, 9.0);
        assert!(matches!(exhaustive_ei(&stats(&[1.0; 21])), Err(Error::TooLarge(21))));
    }

    #[test]
    fn sign_partition_examples() {
        let p = sign_partition(&stats(&[0.5, -0.5, 0.0]));
        assert_eq!(p.hard(), &[1, 0, 0]);
        let g = [1.0, 2.0, 3.0];
        let p = sign_partition(&stats(&g));
        assert!(p.is_degenerate());
        assert_eq!(hard_ei_objective(&g, p.hard(), RiskNormalization::SampleCount), 4.0);
    }

    #[test]
    fn scaling_gradients_scales_objective_quadratically() {
        let g = [0.7, -1.3, 0.2, 2.1, -0.4];
        let big: Vec<f64> = g.iter().map(|v| v * 10.0).collect();
        let (p, a) = exhaustive_ei(&stats(&g)).unwrap();
        let (pb, b) = exhaustive_ei(&stats(&big)).unwrap();
        assert!((b - 100.0 * a).abs() < 1e-9 * b);
        assert_eq!(p, pb);
    }

    #[test]
    fn objective_is_label_swap_invariant() {
        let g = [0.3, -2.0, 1.1];
        let q = [0.2, 0.9, 0.6];
        let q_swapped: Vec<f64> = q.iter().map(|v| 1.0 - v).collect();
        for norm in [RiskNormalization::SampleCount, RiskNormalization::SoftCount] {
            let a = ei_objective(&g, &q, norm);
            let b = ei_objective(&g, &q_swapped, norm);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_count_gradient_matches_finite_differences() {
        let g = [0.3, -2.0, 1.1, 0.4];
        let q = [0.2, 0.9, 0.6, 0.5];
        let mut analytic = [0.0; 4];
        ei_gradient(&g, &q, RiskNormalization::SoftCount, &mut analytic);
        for i in 0..4 {
            let h = 1e-6;
            let mut up = q;
            let mut dn = q;
            up[i] += h;
            dn[i] -= h;
            let fd = (ei_objective(&g, &up, RiskNormalization::SoftCount)
                - ei_objective(&g, &dn, RiskNormalization::SoftCount))
                / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            Array2::zeros((n, 1)),
            Labels::Real(vec![0.0; n]),
            Task::Regression,
            Meta::default(),
        )
        .unwrap()
    }

    #[test]
    fn majority_rules() {
        let d = dataset(10);
        let p = EnvPartition::from_hard(vec![1, 1, 1, 0, 1, 1, 0, 1, 1, 0]).unwrap();
        let s = majority_split(&d, &p).unwrap();
        assert_eq!((s.majority.len(), s.minority.len(), s.majority_env), (7, 3, 1));
        let p = EnvPartition::from_hard(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let s = majority_split(&d, &p).unwrap();
        assert_eq!((s.majority.len(), s.majority_env), (5, 0));
        let p = EnvPartition::from_hard(vec![0; 10]).unwrap();
        assert!(matches!(majority_split(&d, &p), Err(Error::MinorityEmpty)));
    }

    #[test]
    fn csv_has_a_row_per_sample() {
        let p = EnvPartition::from_hard(vec![0, 1]).unwrap();
        let csv = partition_csv(&p, None);
        assert_eq!(csv, "index,soft_q,hard\n0,0,0\n1,1,1\n");
    }
}

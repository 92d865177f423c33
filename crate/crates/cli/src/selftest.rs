//! Oracle suites. Each check recomputes its reference values independently of
//! the library (own losses, own forward pass, own byte layouts, brute force)
//! and compares them with the library's answers.

use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use reiil_core::envinfer::{ei_optimize, exhaustive_ei, hard_ei_objective, sign_partition, EiConfig};
use reiil_core::ingest::{parse_cifar10, parse_idx, write_cifar10, write_idx, IngestError, CIFAR_PIXELS};
use reiil_core::models::{grad, Dense, LinearModel, MlpModel};
use reiil_core::objectives::{irm_penalty, irmv1_objective, per_sample_stats, PerSampleStats, RiskNormalization};
use reiil_core::rng::Rng as ChaRng;
use reiil_core::{Dataset, Labels, Meta, Model, RngSeed, Task};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        penalty_finite_difference(100, seed),
        ei_exactness(200, seed),
        parser_roundtrip(50, seed),
        gradient_integrity(40, seed),
    ]
}

fn normal(rng: &mut ChaRng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// Reference losses
// ---------------------------------------------------------------------------

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn loss_row(task: Task, z: &[f64], y_real: f64, y_class: u32) -> f64 {
    match task {
        Task::Regression => (z[0] - y_real).powi(2),
        Task::Binary => {
            let t = f64::from(y_class);
            log_sum_exp(&[0.0, z[0]]) - t * z[0]
        }
        Task::Multiclass(_) => log_sum_exp(z) - z[y_class as usize],
    }
}

fn row_loss(task: Task, labels: &Labels, i: usize, z: &[f64]) -> f64 {
    match labels {
        Labels::Real(y) => loss_row(task, z, y[i], 0),
        Labels::Class(y) => loss_row(task, z, 0.0, y[i]),
    }
}

/// `Σ q_i l(w·z_i, y_i) / denom`.
fn scaled_risk(task: Task, out: &Array2<f64>, labels: &Labels, q: &[f64], rows: &[usize], denom: f64, w: f64) -> f64 {
    let mut s = 0.0;
    for (&i, &qi) in rows.iter().zip(q) {
        let z: Vec<f64> = out.row(i).iter().map(|v| v * w).collect();
        s += qi * row_loss(task, labels, i, &z);
    }
    s / denom
}

/// Fourth-order central difference.
fn richardson(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

fn random_task(rng: &mut ChaRng, i: usize) -> Task {
    match i % 3 {
        0 => Task::Regression,
        1 => Task::Binary,
        _ => Task::Multiclass(rng.random_range(3..=6)),
    }
}

fn random_labels(rng: &mut ChaRng, task: Task, n: usize) -> Labels {
    match task {
        Task::Regression => Labels::Real((0..n).map(|_| 2.0 * normal(rng)).collect()),
        Task::Binary => Labels::Class((0..n).map(|_| rng.random_range(0..2)).collect()),
        Task::Multiclass(k) => Labels::Class((0..n).map(|_| rng.random_range(0..k as u32)).collect()),
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Penalty versus finite differences
// ---------------------------------------------------------------------------

pub fn penalty_finite_difference(instances: usize, seed: u64) -> Check {
    let mut rng = RngSeed(seed).derive("selftest-penalty").rng();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..instances {
        let task = random_task(&mut rng, i);
        let n = rng.random_range(5..=40);
        let k = task.output_dim();
        let out = Array2::from_shape_fn((n, k), |_| 1.5 * normal(&mut rng));
        let labels = random_labels(&mut rng, task, n);
        let q: Vec<f64> = match i % 4 {
            0 => vec![1.0; n],
            1 => (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(),
            _ => (0..n).map(|_| rng.random::<f64>()).collect(),
        };
        let rows: Vec<usize> = (0..n).collect();
        let deriv = richardson(|w| scaled_risk(task, &out, &labels, &q, &rows, n as f64, w), 1.0, 1e-3);
        let oracle = deriv * deriv;
        let got = per_sample_stats(&out, &labels, task)
            .and_then(|s| irm_penalty(&s, &q))
            .unwrap_or(f64::NAN);
        let e = rel_err(got, oracle, 1e-12);
        worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        if e.is_nan() || e >= 1e-6 {
            failures += 1;
        }
    }
    Check::new(
        "penalty-finite-difference",
        failures == 0,
        format!("{instances} instances, {failures} failures, worst relative error {worst:.2e} (limit 1e-6)"),
    )
}

// ---------------------------------------------------------------------------
// Environment inference versus brute force
// ---------------------------------------------------------------------------

fn brute_force_c(g: &[f64]) -> f64 {
    let n = g.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        let (mut a, mut b) = (0.0, 0.0);
        for (i, gi) in g.iter().enumerate() {
            if mask >> i & 1 == 1 {
                a += gi;
            } else {
                b += gi;
            }
        }
        let (a, b) = (a / n as f64, b / n as f64);
        best = best.max(a * a + b * b);
    }
    best
}

pub fn ei_exactness(trials: usize, seed: u64) -> Check {
    let mut rng = RngSeed(seed).derive("selftest-ei").rng();
    let cfg = EiConfig::default();
    let mut exact = 0;
    let mut brute_agree = 0;
    let mut near = 0;
    let mut worst_ratio: f64 = f64::INFINITY;
    for t in 0..trials {
        let n = rng.random_range(2..=12);
        let mut g: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { normal(&mut rng) })
            .collect();
        if g.iter().all(|&v| v == 0.0) {
            g[0] = normal(&mut rng);
        }
        let stats = PerSampleStats {
            losses: vec![0.0; n],
            w_grads: g.clone(),
        };
        let (_, optimum) = exhaustive_ei(&stats).expect("small instance");
        let sign = hard_ei_objective(&g, sign_partition(&stats).hard(), RiskNormalization::SampleCount);
        if sign == optimum {
            exact += 1;
        }
        if rel_err(brute_force_c(&g), optimum, 1e-15) < 1e-12 {
            brute_agree += 1;
        }
        let inferred = ei_optimize(&stats, &cfg, RngSeed(seed).derive(&format!("trial-{t}")))
            .map(|r| r.final_objective)
            .unwrap_or(0.0);
        let ratio = inferred / optimum;
        worst_ratio = worst_ratio.min(ratio);
        if inferred >= 0.99 * optimum {
            near += 1;
        }
    }
    let need = (trials * 195).div_ceil(200);
    Check::new(
        "ei-exactness",
        exact == trials && brute_agree == trials && near >= need,
        format!(
            "sign partition exact {exact}/{trials}, brute force agrees {brute_agree}/{trials}, \
             optimiser within 1% {near}/{trials} (need {need}), worst ratio {worst_ratio:.4}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Parsers
// ---------------------------------------------------------------------------

fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

/// `Ok(true)` for a typed error, `Ok(false)` for success, `Err` on panic.
fn survives<T>(f: impl FnOnce() -> Result<T, IngestError>) -> Result<bool, ()> {
    catch_unwind(AssertUnwindSafe(f)).map(|r| r.is_err()).map_err(|_| ())
}

pub fn parser_roundtrip(files: usize, seed: u64) -> Check {
    let mut rng = RngSeed(seed).derive("selftest-parsers").rng();
    let mut idx_ok = 0;
    let mut cifar_ok = 0;
    let mut corrupt_cases = 0;
    let mut panics = 0;
    let mut missed = 0;
    let prev_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for _ in 0..files {
        let dims: Vec<u32> = if rng.random_bool(0.5) {
            vec![rng.random_range(0..40)]
        } else {
            vec![rng.random_range(0..4), rng.random_range(1..9), rng.random_range(1..9)]
        };
        let len: u32 = dims.iter().product();
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let bytes = idx_bytes(&dims, &payload);
        if let Ok(t) = parse_idx(&bytes) {
            let dims_match = t.dims.iter().map(|&d| d as u32).eq(dims.iter().copied());
            if dims_match && t.data == payload && write_idx(&t) == bytes {
                idx_ok += 1;
            }
        }
        for cut in 0..bytes.len() {
            corrupt_cases += 1;
            match survives(|| parse_idx(&bytes[..cut])) {
                Ok(true) => {}
                Ok(false) => missed += 1,
                Err(()) => panics += 1,
            }
        }
        let mut longer = bytes.clone();
        longer.push(rng.random());
        corrupt_cases += 1;
        match survives(|| parse_idx(&longer)) {
            Ok(true) => {}
            Ok(false) => missed += 1,
            Err(()) => panics += 1,
        }
        for _ in 0..20 {
            let mut m = bytes.clone();
            let at = rng.random_range(0..m.len().min(16));
            m[at] = rng.random();
            corrupt_cases += 1;
            if survives(|| parse_idx(&m)).is_err() {
                panics += 1;
            }
        }

        let n_rec = rng.random_range(0..4);
        let mut cbytes = Vec::new();
        let mut expected = Vec::new();
        for _ in 0..n_rec {
            let label: u8 = rng.random_range(0..10);
            let pixels: Vec<u8> = (0..CIFAR_PIXELS).map(|_| rng.random()).collect();
            cbytes.push(label);
            cbytes.extend_from_slice(&pixels);
            expected.push((label, pixels));
        }
        if let Ok(recs) = parse_cifar10(&cbytes) {
            let same = recs.len() == expected.len()
                && recs.iter().zip(&expected).all(|(r, (l, p))| r.label == *l && r.pixels[..] == p[..]);
            if same && write_cifar10(&recs) == cbytes {
                cifar_ok += 1;
            }
        }
        for _ in 0..20 {
            if cbytes.is_empty() {
                break;
            }
            let cut = rng.random_range(0..cbytes.len());
            corrupt_cases += 1;
            let expect_err = cut % 3073 != 0;
            match survives(|| parse_cifar10(&cbytes[..cut])) {
                Ok(e) if e == expect_err => {}
                Ok(_) => missed += 1,
                Err(()) => panics += 1,
            }
        }
        if n_rec > 0 {
            let mut bad = cbytes.clone();
            bad[0] = rng.random_range(10..=255);
            corrupt_cases += 1;
            match survives(|| parse_cifar10(&bad)) {
                Ok(true) => {}
                Ok(false) => missed += 1,
                Err(()) => panics += 1,
            }
        }
    }
    std::panic::set_hook(prev_hook);
    Check::new(
        "parser-bit-exactness",
        idx_ok == files && cifar_ok == files && panics == 0 && missed == 0,
        format!(
            "IDX round trips {idx_ok}/{files}, CIFAR-10 round trips {cifar_ok}/{files}, \
             {corrupt_cases} corrupt inputs: {panics} panics, {missed} accepted"
        ),
    )
}

// ---------------------------------------------------------------------------
// Parameter gradients
// ---------------------------------------------------------------------------

/// Reference forward pass; also reports the smallest |pre-activation| so
/// that instances sitting on a ReLU kink can be redrawn.
fn oracle_forward(model: &Model, x: &Array2<f64>) -> (Array2<f64>, f64) {
    match model {
        Model::Linear(m) => {
            let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
                x.row(i).iter().zip(&m.weights).map(|(a, b)| a * b).sum::<f64>() + m.bias.unwrap_or(0.0)
            });
            (out, f64::INFINITY)
        }
        Model::Mlp(m) => {
            let mut h = x.clone();
            let mut closest = f64::INFINITY;
            for (li, l) in m.layers.iter().enumerate() {
                let mut next = Array2::zeros((h.nrows(), l.weight.ncols()));
                for i in 0..h.nrows() {
                    for j in 0..l.weight.ncols() {
                        let mut s = l.bias[j];
                        for k in 0..l.weight.nrows() {
                            s += h[[i, k]] * l.weight[[k, j]];
                        }
                        next[[i, j]] = s;
                    }
                }
                if li + 1 < m.layers.len() {
                    closest = next.iter().fold(closest, |c, v| c.min(v.abs()));
                    next.mapv_inplace(|v| v.max(0.0));
                }
                h = next;
            }
            (h, closest)
        }
    }
}

fn oracle_weight_norm(model: &Model) -> f64 {
    match model {
        Model::Linear(m) => m.weights.iter().map(|w| w * w).sum(),
        Model::Mlp(m) => m.layers.iter().flat_map(|l| l.weight.iter()).map(|w| w * w).sum(),
    }
}

enum Objective<'a> {
    Weighted { data: &'a Dataset, weights: &'a [f64], l2: f64 },
    Irm { envs: &'a [Dataset], lambda: f64 },
}

fn oracle_value(model: &Model, obj: &Objective<'_>) -> f64 {
    match obj {
        Objective::Weighted { data, weights, l2 } => {
            let (out, _) = oracle_forward(model, data.features());
            let rows: Vec<usize> = (0..data.len()).collect();
            let total: f64 = weights.iter().sum();
            scaled_risk(data.task(), &out, data.labels(), weights, &rows, total, 1.0) + l2 * oracle_weight_norm(model)
        }
        Objective::Irm { envs, lambda } => envs
            .iter()
            .map(|e| {
                let (out, _) = oracle_forward(model, e.features());
                let rows: Vec<usize> = (0..e.len()).collect();
                let ones = vec![1.0; e.len()];
                let n = e.len() as f64;
                let risk = |w: f64| scaled_risk(e.task(), &out, e.labels(), &ones, &rows, n, w);
                let d = richardson(risk, 1.0, 1e-3);
                risk(1.0) + lambda * d * d
            })
            .sum(),
    }
}

fn random_model(rng: &mut ChaRng, i: usize, dim: usize, task: Task) -> Model {
    let seed = RngSeed(rng.random());
    if task.output_dim() == 1 && i.is_multiple_of(3) {
        let bias = rng.random_bool(0.5).then(|| normal(rng));
        Model::Linear(LinearModel::from_weights((0..dim).map(|_| normal(rng)).collect(), bias))
    } else {
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=5)).collect();
        let mut m = MlpModel::init(dim, &hidden, task.output_dim(), seed).expect("positive widths");
        let layers: Vec<Dense> = m
            .layers
            .drain(..)
            .map(|mut l| {
                l.bias.mapv_inplace(|_| 0.3 * normal(rng));
                l
            })
            .collect();
        Model::Mlp(MlpModel::from_layers(layers).expect("same shapes"))
    }
}

fn random_dataset(rng: &mut ChaRng, n: usize, dim: usize, task: Task) -> Dataset {
    let x = Array2::from_shape_fn((n, dim), |_| normal(rng));
    let labels = random_labels(rng, task, n);
    Dataset::new(x, labels, task, Meta::default()).expect("consistent shapes")
}

pub fn gradient_integrity(instances: usize, seed: u64) -> Check {
    let mut rng = RngSeed(seed).derive("selftest-gradients").rng();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut checked = 0;
    let mut i = 0;
    while checked < instances {
        i += 1;
        let task = random_task(&mut rng, i);
        let dim = rng.random_range(1..=4);
        let model = random_model(&mut rng, i, dim, task);
        let irm = i % 2 == 0;
        let envs: Vec<Dataset> = (0..rng.random_range(2..=3))
            .map(|_| {
                let n = rng.random_range(3..=12);
                random_dataset(&mut rng, n, dim, task)
            })
            .collect();
        let weights: Vec<f64> = (0..envs[0].len()).map(|_| 0.1 + rng.random::<f64>()).collect();
        let l2 = if rng.random_bool(0.5) { 0.0 } else { 0.05 * rng.random::<f64>() };
        let lambda = 10f64.powf(rng.random_range(-1.0..2.0));
        let kinked = envs.iter().any(|e| oracle_forward(&model, e.features()).1 < 1e-2);
        if kinked {
            continue;
        }
        checked += 1;
        let obj = if irm {
            Objective::Irm { envs: &envs, lambda }
        } else {
            Objective::Weighted {
                data: &envs[0],
                weights: &weights,
                l2,
            }
        };
        let analytic = match &obj {
            Objective::Irm { envs, lambda } => {
                let refs: Vec<&Dataset> = envs.iter().collect();
                irmv1_objective(&refs, &model, *lambda).map(|r| r.1)
            }
            Objective::Weighted { data, weights, l2 } => grad(&model, data, weights, *l2).map(|r| r.0),
        };
        let Ok(analytic) = analytic else {
            failures += 1;
            continue;
        };
        let base = model.params();
        for (p, &a) in analytic.iter().enumerate() {
            let fd = richardson(
                |delta| {
                    let mut m = model.clone();
                    let mut params = base.clone();
                    params[p] += delta;
                    m.set_params(&params).expect("same length");
                    oracle_value(&m, &obj)
                },
                0.0,
                1e-4,
            );
            let e = rel_err(a, fd, 1e-3);
            worst = worst.max(e);
            if e.is_nan() || e >= 1e-4 {
                failures += 1;
            }
        }
    }
    Check::new(
        "gradient-integrity",
        failures == 0,
        format!(
            "{instances} models (linear and MLP; weighted risk and IRMv1), {failures} failures, \
             worst relative error {worst:.2e} (limit 1e-4)"
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for c in [
            penalty_finite_difference(12, 3),
            ei_exactness(10, 3),
            parser_roundtrip(3, 3),
            gradient_integrity(6, 3),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn brute_force_matches_hand_value() {
        // g = (1, -1): split apart gives (1/2)² + (1/2)²
        assert_eq!(brute_force_c(&[1.0, -1.0]), 0.5);
    }
}

//! Linear and MLP models with hand-written backpropagation, full-batch Adam,
//! and the training loop.
//!
//! Parameters are exposed as one flat vector (layer by layer: weights
//! row-major, then bias) so optimisers and finite-difference checks can treat
//! every model the same way.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::objectives::{Objective, WeightedRisk};
use crate::rng::RngSeed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Linear {
        #[serde(default)]
        bias: bool,
    },
    Mlp {
        hidden: Vec<usize>,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp {
            hidden: vec![256, 256],
        }
    }
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, task: Task, seed: RngSeed) -> Result<Model> {
        match self {
            ModelSpec::Linear { bias } => {
                if task.output_dim() != 1 {
                    return Err(Error::InvalidSpec(
                        "a linear model has one output; use an MLP for multiclass tasks".into(),
                    ));
                }
                Ok(Model::Linear(LinearModel::init(input_dim, *bias, seed)))
            }
            ModelSpec::Mlp { hidden } => Ok(Model::Mlp(MlpModel::init(
                input_dim,
                hidden,
                task.output_dim(),
                seed,
            )?)),
        }
    }
}

fn gaussian_init(rng: &mut crate::rng::Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array1<f64>,
    pub bias: Option<f64>,
}

impl LinearModel {
    pub fn init(dim: usize, bias: bool, seed: RngSeed) -> Self {
        let mut rng = seed.rng();
        LinearModel {
            weights: Array1::from(gaussian_init(&mut rng, dim, dim)),
            bias: bias.then_some(0.0),
        }
    }

    pub fn from_weights(weights: Vec<f64>, bias: Option<f64>) -> Self {
        LinearModel {
            weights: Array1::from(weights),
            bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Fully connected network, ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
}

impl MlpModel {
    pub fn init(input: usize, hidden: &[usize], output: usize, seed: RngSeed) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        let mut rng = seed.rng();
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array2::from_shape_vec((w[0], w[1]), gaussian_init(&mut rng, w[0], w[0] * w[1]))
                    .expect("shape matches length"),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(MlpModel { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::InvalidSpec(format!("layer {i} bias width mismatch")));
            }
            if i > 0 && layers[i - 1].weight.ncols() != l.weight.nrows() {
                return Err(Error::InvalidSpec(format!("layer {i} does not chain")));
            }
        }
        Ok(MlpModel { layers })
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.ncols())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.weights.len(),
            Model::Mlp(m) => m.layers[0].weight.nrows(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::Linear(_) => 1,
            Model::Mlp(m) => m.layers.last().map_or(0, |l| l.weight.ncols()),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Linear(m) => ModelSpec::Linear {
                bias: m.bias.is_some(),
            },
            Model::Mlp(m) => ModelSpec::Mlp {
                hidden: m.hidden_widths(),
            },
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(match self {
            Model::Linear(m) => {
                let b = m.bias.unwrap_or(0.0);
                let dim = m.weights.len();
                let w = m.weights.as_slice().expect("owned vector");
                match x.as_slice() {
                    Some(xs) if dim > 0 => {
                        let out: Vec<f64> = xs
                            .chunks_exact(dim)
                            .map(|r| r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
                            .collect();
                        Array2::from_shape_vec((x.nrows(), 1), out).expect("one column")
                    }
                    _ => (x.dot(&m.weights) + b).insert_axis(Axis(1)),
                }
            }
            Model::Mlp(m) => {
                let mut h = x.to_owned();
                for (i, l) in m.layers.iter().enumerate() {
                    h = h.dot(&l.weight) + &l.bias;
                    if i + 1 < m.layers.len() {
                        h.mapv_inplace(|v| v.max(0.0));
                    }
                }
                h
            }
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            Model::Linear(m) => m.weights.len() + usize::from(m.bias.is_some()),
            Model::Mlp(m) => m.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        match self {
            Model::Linear(m) => {
                p.extend(m.weights.iter());
                p.extend(m.bias);
            }
            Model::Mlp(m) => {
                for l in &m.layers {
                    p.extend(l.weight.iter());
                    p.extend(l.bias.iter());
                }
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.num_params(),
                got: p.len(),
            });
        }
        match self {
            Model::Linear(m) => {
                let d = m.weights.len();
                m.weights.assign(&ndarray::ArrayView1::from(&p[..d]));
                if let Some(b) = m.bias.as_mut() {
                    *b = p[d];
                }
            }
            Model::Mlp(m) => {
                let mut off = 0;
                for l in &mut m.layers {
                    for (w, v) in l.weight.iter_mut().zip(&p[off..]) {
                        *w = *v;
                    }
                    off += l.weight.len();
                    for (b, v) in l.bias.iter_mut().zip(&p[off..]) {
                        *b = *v;
                    }
                    off += l.bias.len();
                }
            }
        }
        Ok(())
    }

    /// Which entries of [`Model::params`] are weights (L2-regularised); biases are not.
    pub fn l2_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        match self {
            Model::Linear(m) => {
                mask.extend(std::iter::repeat_n(true, m.weights.len()));
                mask.extend(m.bias.map(|_| false));
            }
            Model::Mlp(m) => {
                for l in &m.layers {
                    mask.extend(std::iter::repeat_n(true, l.weight.len()));
                    mask.extend(std::iter::repeat_n(false, l.bias.len()));
                }
            }
        }
        mask
    }

    /// Squared L2 norm of the weights (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.params()
            .iter()
            .zip(self.l2_mask())
            .filter(|(_, m)| *m)
            .map(|(p, _)| p * p)
            .sum()
    }

    /// Value of `objective` at `step` and its gradient with respect to the flat parameters.
    pub fn objective_grad(
        &self,
        x: &Array2<f64>,
        objective: &dyn Objective,
        step: usize,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        match self {
            Model::Linear(m) => {
                let out = self.forward(x)?;
                let (loss, d) = objective.evaluate(step, &out)?;
                let d = d.column(0);
                let dim = m.weights.len();
                let mut g = vec![0.0; dim];
                match x.as_slice() {
                    Some(xs) if dim > 0 => {
                        for (row, &di) in xs.chunks_exact(dim).zip(d.iter()) {
                            for (gj, xj) in g.iter_mut().zip(row) {
                                *gj += di * xj;
                            }
                        }
                    }
                    _ => g = x.t().dot(&d).to_vec(),
                }
                if m.bias.is_some() {
                    g.push(d.sum());
                }
                Ok((loss, g))
            }
            Model::Mlp(m) => {
                // pre-activations of every layer
                let depth = m.layers.len();
                let mut pre = Vec::with_capacity(depth);
                // post-activations of the hidden layers
                let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(depth.saturating_sub(1));
                for (i, l) in m.layers.iter().enumerate() {
                    let a = if i == 0 {
                        x.dot(&l.weight) + &l.bias
                    } else {
                        hidden[i - 1].dot(&l.weight) + &l.bias
                    };
                    if i + 1 < depth {
                        hidden.push(a.mapv(|v| v.max(0.0)));
                    }
                    pre.push(a);
                }
                let (loss, mut delta) = objective.evaluate(step, &pre[depth - 1])?;
                let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(depth);
                for i in (0..depth).rev() {
                    let gw = if i == 0 {
                        x.t().dot(&delta)
                    } else {
                        hidden[i - 1].t().dot(&delta)
                    };
                    let gb = delta.sum_axis(Axis(0));
                    if i > 0 {
                        let mut back = delta.dot(&m.layers[i].weight.t());
                        back.zip_mut_with(&pre[i - 1], |d, &a| {
                            if a <= 0.0 {
                                *d = 0.0
                            }
                        });
                        delta = back;
                    }
                    grads.push((gw, gb));
                }
                let mut flat = Vec::with_capacity(self.num_params());
                for (gw, gb) in grads.iter().rev() {
                    flat.extend(gw.iter());
                    flat.extend(gb.iter());
                }
                Ok((loss, flat))
            }
        }
    }
}

/// Gradient of `(Σ w_i l_i)/(Σ w_i) + l2·‖θ‖²` (biases excluded from the
/// penalty), together with the weighted mean loss.
pub fn grad(model: &Model, data: &Dataset, sample_weights: &[f64], l2: f64) -> Result<(Vec<f64>, f64)> {
    let risk = WeightedRisk::new(data.labels(), data.task(), sample_weights.to_vec())?;
    let (loss, mut g) = model.objective_grad(data.features(), &risk, 0)?;
    add_l2(model, l2, &mut g);
    Ok((g, loss))
}

fn add_l2(model: &Model, l2: f64, g: &mut [f64]) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let mut norm = 0.0;
    for ((gi, p), m) in g.iter_mut().zip(model.params()).zip(model.l2_mask()) {
        if m {
            *gi += 2.0 * l2 * p;
            norm += p * p;
        }
    }
    l2 * norm
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_steps() -> usize {
    900
}
fn default_l2() -> f64 {
    1.1e-3
}

/// Optimiser hyperparameters plus training length and L2 strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_l2")]
    pub l2: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            steps: default_steps(),
            l2: default_l2(),
        }
    }
}

impl OptimSpec {
    /// Defaults for the small SEM regression problems.
    pub fn regression() -> Self {
        OptimSpec {
            steps: 10_000,
            ..OptimSpec::default()
        }
    }
}

/// Full-batch Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn adam(num_params: usize, spec: &OptimSpec) -> Self {
        OptimizerState {
            lr: spec.lr,
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.eps,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Descends along `grads`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Runs `steps` full-batch Adam updates on `objective + l2·‖θ‖²` and returns
/// the loss before each update.
pub fn train_objective(
    model: &mut Model,
    x: &Array2<f64>,
    objective: &dyn Objective,
    opt: &mut OptimizerState,
    steps: usize,
    l2: f64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidSpec("training needs at least one step".into()));
    }
    let mut params = model.params();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, mut g) = model.objective_grad(x, objective, step)?;
        let reg = add_l2(model, l2, &mut g);
        let scale = objective.scale(step);
        let total = (loss + reg) * scale;
        if !total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        if scale != 1.0 {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        trace.push(total);
        opt.update(&mut params, &g);
        model.set_params(&params)?;
    }
    Ok(trace)
}

/// Sums two objectives evaluated on the same outputs.
struct Combined<'a> {
    risk: &'a dyn Objective,
    extra: &'a dyn Objective,
}

impl Objective for Combined<'_> {
    fn evaluate(&self, step: usize, outputs: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let (a, mut da) = self.risk.evaluate(step, outputs)?;
        let (b, db) = self.extra.evaluate(step, outputs)?;
        da += &db;
        Ok((a + b, da))
    }

    fn scale(&self, step: usize) -> f64 {
        self.extra.scale(step)
    }
}

/// Weighted-risk training with an optional extra differentiable term.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    sample_weights: &[f64],
    opt: &mut OptimizerState,
    steps: usize,
    l2: f64,
    extra_loss: Option<&dyn Objective>,
) -> Result<Vec<f64>> {
    let risk = WeightedRisk::new(data.labels(), data.task(), sample_weights.to_vec())?;
    match extra_loss {
        None => train_objective(model, data.features(), &risk, opt, steps, l2),
        Some(extra) => {
            let both = Combined { risk: &risk, extra };
            train_objective(model, data.features(), &both, opt, steps, l2)
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: u32 LE header length, JSON header, f64 LE parameters.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    architecture: ModelSpec,
    input_dim: usize,
    output_dim: usize,
    num_params: usize,
}

const CHECKPOINT_FORMAT: &str = "reiil-model";

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        architecture: model.spec(),
        input_dim: model.input_dim(),
        output_dim: model.output_dim(),
        num_params: model.num_params(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(4 + json.len() + 8 * header.num_params);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let truncated = || Error::Format("checkpoint is truncated".into());
    let hlen = u32::from_le_bytes(bytes.get(..4).ok_or_else(truncated)?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(bytes.get(4..4 + hlen).ok_or_else(truncated)?)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a model checkpoint: {}", header.format)));
    }
    let task = match header.output_dim {
        1 => Task::Regression,
        k => Task::Multiclass(k),
    };
    let mut model = header.architecture.build(header.input_dim, task, RngSeed(0))?;
    let payload = &bytes[4 + hlen..];
    if payload.len() != 8 * model.num_params() || header.num_params != model.num_params() {
        return Err(Error::Format("checkpoint parameter count mismatch".into()));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.set_params(&params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, Meta};
    use ndarray::array;

    #[test]
    fn linear_forward_picks_first_coordinate() {
        let m = Model::Linear(LinearModel::from_weights(vec![1.0, 0.0, 0.0], None));
        assert_eq!(m.forward(&array![[3.0, 0.0, 0.0]]).unwrap()[[0, 0]], 3.0);
        assert!(matches!(
            m.forward(&array![[3.0, 0.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut m = Model::Mlp(MlpModel::init(4, &[8, 8], 3, RngSeed(1)).unwrap());
        let n = m.num_params();
        m.set_params(&vec![0.0; n]).unwrap();
        let out = m.forward(&Array2::from_elem((5, 4), 1.7)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_hidden_layer() {
        let m = Model::Mlp(
            MlpModel::from_layers(vec![
                Dense {
                    // W = [[1, -1], [0, 2]] stored in×out, i.e. transposed
                    weight: array![[1.0, 0.0], [-1.0, 2.0]],
                    bias: array![0.0, 0.0],
                },
                Dense {
                    weight: array![[1.0], [1.0]],
                    bias: array![0.0],
                },
            ])
            .unwrap(),
        );
        // hidden: relu(W·x) = [0, 2]
        assert_eq!(m.forward(&array![[1.0, 1.0]]).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn params_round_trip_and_mask() {
        let mut m = Model::Mlp(MlpModel::init(3, &[4], 2, RngSeed(3)).unwrap());
        let p = m.params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let doubled: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        m.set_params(&doubled).unwrap();
        assert_eq!(m.params(), doubled);
        assert_eq!(m.l2_mask().iter().filter(|b| !**b).count(), 6);
    }

    #[test]
    fn single_weight_gradient_equals_that_sample() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let data = Dataset::new(x.clone(), Labels::Real(vec![1.0, 0.0, 2.0]), Task::Regression, Meta::default()).unwrap();
        let m = Model::Linear(LinearModel::from_weights(vec![0.3, -0.2], Some(0.1)));
        let (g, loss) = grad(&m, &data, &[0.0, 1.0, 0.0], 0.0).unwrap();
        let single = data.select(&[1]).unwrap();
        let (g1, loss1) = grad(&m, &single, &[1.0], 0.0).unwrap();
        assert_eq!(loss, loss1);
        for (a, b) in g.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ridge_shrinks_weights_without_data_signal() {
        // zero-residual data: only the L2 term produces a gradient
        let data = Dataset::new(array![[0.0, 0.0]], Labels::Real(vec![0.0]), Task::Regression, Meta::default()).unwrap();
        let mut m = Model::Linear(LinearModel::from_weights(vec![1.0, -2.0], None));
        let before = m.weight_norm_sq();
        let mut opt = OptimizerState::adam(m.num_params(), &OptimSpec::default());
        train(&mut m, &data, &[1.0], &mut opt, 5, 0.1, None).unwrap();
        assert!(m.weight_norm_sq() < before);
    }

    #[test]
    fn separable_pair_is_fit() {
        let data = Dataset::new(
            array![[1.0, 0.0], [-1.0, 0.0]],
            Labels::Class(vec![1, 0]),
            Task::Binary,
            Meta::default(),
        )
        .unwrap();
        let mut m = ModelSpec::Linear { bias: true }.build(2, Task::Binary, RngSeed(0)).unwrap();
        let spec = OptimSpec { lr: 0.05, ..OptimSpec::default() };
        let mut opt = OptimizerState::adam(m.num_params(), &spec);
        train(&mut m, &data, &[1.0, 1.0], &mut opt, 200, 0.0, None).unwrap();
        let out = m.forward(data.features()).unwrap();
        assert!(out[[0, 0]] > 0.0 && out[[1, 0]] < 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ModelSpec::Mlp { hidden: vec![5] }.build(3, Task::Multiclass(4), RngSeed(9)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), m);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn linear_rejects_multiclass() {
        assert!(ModelSpec::Linear { bias: false }.build(3, Task::Multiclass(3), RngSeed(0)).is_err());
    }
}

//! Weight prediction network.
//!
//! An MLP maps each sample's K-exit loss vector to K raw scores. Scores are
//! squashed into `(-delta, delta)`, shifted to sum to zero over the whole
//! `B x K` table, and offset by one to give the loss weights. The gradient of
//! the meta objective with respect to the weights comes from
//! [`meta_weight_grad`]; [`wpn_backward`] carries it back to the WPN
//! parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::backbone::PerSampleGrads;
use crate::error::{Error, Result};
use crate::numkit::{sigmoid, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WpnConfig {
    pub num_exits: usize,
    #[serde(default = "WpnConfig::default_width")]
    pub hidden_width: usize,
    #[serde(default = "WpnConfig::default_depth")]
    pub hidden_depth: usize,
    #[serde(default = "WpnConfig::default_delta")]
    pub delta: f64,
}

impl WpnConfig {
    fn default_width() -> usize {
        500
    }

    fn default_depth() -> usize {
        1
    }

    fn default_delta() -> f64 {
        0.8
    }

    pub fn new(num_exits: usize) -> Self {
        Self {
            num_exits,
            hidden_width: Self::default_width(),
            hidden_depth: Self::default_depth(),
            delta: Self::default_delta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_exits == 0 || self.hidden_width == 0 || self.hidden_depth == 0 {
            return Err(Error::Config(
                "WPN exits, hidden width and depth must all be >= 1".into(),
            ));
        }
        // delta = 0 is accepted as the degenerate "all weights one" setting.
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "WPN delta must lie in [0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Layer shapes as (in, out), hidden layers first.
    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_depth + 1);
        let mut in_dim = self.num_exits;
        for _ in 0..self.hidden_depth {
            shapes.push((in_dim, self.hidden_width));
            in_dim = self.hidden_width;
        }
        shapes.push((in_dim, self.num_exits));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WpnParams {
    config: WpnConfig,
    values: Vec<f64>,
}

impl WpnParams {
    pub fn from_values(config: WpnConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.num_params() {
            return Err(Error::Shape(format!(
                "WPN expects {} parameters, got {}",
                config.num_params(),
                values.len()
            )));
        }
        Ok(Self { config, values })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    pub fn init(config: WpnConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut values = Vec::with_capacity(config.num_params());
        for (in_dim, out_dim) in config.shapes() {
            let bound = 1.0 / (in_dim as f64).sqrt();
            for _ in 0..in_dim * out_dim {
                values.push(rng.uniform_range(-bound, bound));
            }
            values.extend(std::iter::repeat_n(0.0, out_dim));
        }
        Self::from_values(config, values)
    }

    pub fn config(&self) -> &WpnConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }
}

static NEXT_CACHE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_CACHE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Raw WPN scores, tagged with the forward pass that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub values: Matrix,
    pass_id: u64,
}

impl RawOutputs {
    /// Scores that did not come from [`wpn_forward`]; they cannot be
    /// backpropagated.
    pub fn detached(values: Matrix) -> Self {
        Self { values, pass_id: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct WpnCache {
    pass_id: u64,
    config: WpnConfig,
    /// Layer inputs; `inputs[0]` is the loss matrix.
    inputs: Vec<Matrix>,
}

impl WpnCache {
    /// ReLU on/off state of every hidden unit for every row.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.inputs[1..]
            .iter()
            .flat_map(|m| m.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct WeightCache {
    pass_id: u64,
    delta: f64,
    /// Sigmoid of the raw scores.
    squashed: Matrix,
}

/// Zero-sum perturbation `w~`, `B x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMatrix(pub Matrix);

/// Loss weights `w = 1 + w~`, `B x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(pub Matrix);

impl WeightMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        WeightMatrix(Matrix::from_vec(rows, cols, vec![1.0; rows * cols]).expect("shape"))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Runs every loss row through the MLP independently.
pub fn wpn_forward(params: &WpnParams, losses: &Matrix) -> Result<(RawOutputs, WpnCache)> {
    let cfg = &params.config;
    if losses.cols() != cfg.num_exits {
        return Err(Error::Shape(format!(
            "loss matrix has {} columns, WPN expects {}",
            losses.cols(),
            cfg.num_exits
        )));
    }
    if !losses.is_finite() {
        return Err(Error::Numeric("non-finite loss fed to the WPN".into()));
    }
    let shapes = cfg.shapes();
    let last = shapes.len() - 1;
    let mut inputs = Vec::with_capacity(shapes.len());
    let mut current = losses.clone();
    let mut offset = 0;
    for (layer, &(in_dim, out_dim)) in shapes.iter().enumerate() {
        let w = &params.values[offset..offset + in_dim * out_dim];
        let b = &params.values[offset + in_dim * out_dim..offset + (in_dim + 1) * out_dim];
        offset += (in_dim + 1) * out_dim;
        let mut next = Matrix::zeros(current.rows(), out_dim);
        for r in 0..current.rows() {
            let x = current.row(r);
            let y = next.row_mut(r);
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                y[o] = if layer < last { acc.max(0.0) } else { acc };
            }
        }
        inputs.push(std::mem::replace(&mut current, next));
    }
    let pass_id = fresh_id();
    Ok((
        RawOutputs {
            values: current,
            pass_id,
        },
        WpnCache {
            pass_id,
            config: cfg.clone(),
            inputs,
        },
    ))
}

/// `s = sigmoid(raw)`, `p = delta (2 s - 1)`, `w~ = p - mean(p)` over all
/// entries, `w = 1 + w~`.
pub fn make_weights(raw: &RawOutputs, delta: f64) -> Result<(PerturbationMatrix, WeightMatrix, WeightCache)> {
    let values = &raw.values;
    if !values.is_finite() {
        return Err(Error::Numeric("non-finite WPN output".into()));
    }
    let mut squashed = values.clone();
    for v in squashed.data_mut() {
        *v = sigmoid(*v);
    }
    let mut pert = squashed.clone();
    for v in pert.data_mut() {
        *v = delta * (2.0 * *v - 1.0);
    }
    let mean = pert.mean();
    for v in pert.data_mut() {
        *v -= mean;
    }
    let mut weights = pert.clone();
    for v in weights.data_mut() {
        *v += 1.0;
    }
    Ok((
        PerturbationMatrix(pert),
        WeightMatrix(weights),
        WeightCache {
            pass_id: raw.pass_id,
            delta,
            squashed,
        },
    ))
}

/// Pre-normalisation perturbation `delta (2 sigmoid(raw) - 1)`.
pub fn squash(raw: &Matrix, delta: f64) -> Matrix {
    let mut out = raw.clone();
    for v in out.data_mut() {
        *v = delta * (2.0 * sigmoid(*v) - 1.0);
    }
    out
}

/// Derivative of the meta loss at the pseudo-updated backbone with respect
/// to each training weight.
///
/// The pseudo step `theta - (lr/N) sum w_ik g_ik` is affine in `w`, so
/// `dL/dw_ik = -(lr/N) <meta_grad, g_ik>` holds exactly.
pub fn meta_weight_grad(grads: &PerSampleGrads, meta_grad: &[f64], lr: f64, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Shape("N must be positive".into()));
    }
    let mut out = grads.project(meta_grad)?;
    let scale = -lr / n as f64;
    for v in out.data_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// Gradient of the meta loss with respect to the WPN parameters, given
/// `dL/dw` and the caches of the forward pass that produced the weights.
pub fn wpn_backward(params: &WpnParams, fwd: &WpnCache, wts: &WeightCache, d_weights: &Matrix) -> Result<Vec<f64>> {
    if fwd.pass_id != wts.pass_id || wts.pass_id == 0 {
        return Err(Error::Usage(
            "weight cache does not belong to this WPN forward pass".into(),
        ));
    }
    if fwd.config != params.config {
        return Err(Error::Usage("WPN cache was produced by another network".into()));
    }
    let s = &wts.squashed;
    if d_weights.rows() != s.rows() || d_weights.cols() != s.cols() {
        return Err(Error::Shape(format!(
            "dL/dw is {}x{}, weights are {}x{}",
            d_weights.rows(),
            d_weights.cols(),
            s.rows(),
            s.cols()
        )));
    }
    // w = 1 + p - mean(p): the Jacobian is I - (1/n) 11^T.
    let mean = d_weights.mean();
    let mut upstream = d_weights.clone();
    for (g, sv) in upstream.data_mut().iter_mut().zip(s.data()) {
        *g = (*g - mean) * 2.0 * wts.delta * sv * (1.0 - sv);
    }

    let shapes = params.config.shapes();
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(i, o) in &shapes {
        offsets.push(offset);
        offset += (i + 1) * o;
    }
    let mut grad = vec![0.0; params.num_params()];
    for layer in (0..shapes.len()).rev() {
        let (in_dim, out_dim) = shapes[layer];
        let start = offsets[layer];
        let w = &params.values[start..start + in_dim * out_dim];
        let input = &fwd.inputs[layer];
        let mut down = Matrix::zeros(input.rows(), in_dim);
        for r in 0..input.rows() {
            let x = input.row(r);
            let d = upstream.row(r);
            for o in 0..out_dim {
                let dv = d[o];
                if dv == 0.0 {
                    continue;
                }
                let row = o * in_dim;
                for u in 0..in_dim {
                    grad[start + row + u] += dv * x[u];
                }
                grad[start + in_dim * out_dim + o] += dv;
                if layer > 0 {
                    let dr = down.row_mut(r);
                    for u in 0..in_dim {
                        dr[u] += w[row + u] * dv;
                    }
                }
            }
        }
        if layer > 0 {
            // The input of this layer is the ReLU output of the previous one.
            for (dv, xv) in down.data_mut().iter_mut().zip(input.data()) {
                if *xv <= 0.0 {
                    *dv = 0.0;
                }
            }
            upstream = down;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &[f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<Vec<f64>> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam over {} parameters got gradient {} and moments {}/{}",
            params.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let g = grad[j];
        state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
        state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[j] / bc1;
        let v_hat = state.v[j] / bc2;
        out.push(params[j] - lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
    Ok(out)
}

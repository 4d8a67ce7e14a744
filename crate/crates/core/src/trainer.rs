//! Training loops: the meta-learned weighting step, the cumulative-loss
//! baseline and the ablation variants.
//!
//! One L2W mini-batch is split into halves A and B. A substep trains the
//! backbone on one half and uses the other as meta data; the roles are then
//! swapped, so every sample is used once for training per mini-batch.
//!
//! A substep runs, in order:
//! 1. forward + per-sample gradients on the training half;
//! 2. WPN weights from the training-half losses;
//! 3. on WPN-update iterations: a momentum-free pseudo step of the backbone,
//!    meta-data allocation and meta loss at the pseudo parameters, and an
//!    Adam step on the WPN through the exact weight gradient;
//! 4. fresh weights from the (possibly updated) WPN, and the real SGD step.

use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    count_mul_adds, forward_all, forward_and_grads, grad_weighted_loss, init_params, loss_grad, pseudo_step, sgd_step,
    BackboneConfig, BackboneParams, ExitOutputs, SgdConfig, SgdState,
};
use crate::checkpoint::Checkpoint;
use crate::datahub::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::exitpolicy::{allocate_meta, calibrate_thresholds, dynamic_infer, exit_counts, expected_cost, AllocationResult, CostModel};
use crate::numkit::{Matrix, RngStream};
use crate::wpn::{adam_step, make_weights, meta_weight_grad, wpn_backward, wpn_forward, AdamConfig, AdamState, WeightMatrix, WpnConfig, WpnParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VariantKind {
    L2w,
    Baseline,
    FixedWeightsAscending,
    FixedWeightsDescending,
    VanillaSelection,
    FrozenWpn { path: PathBuf },
    VanillaMetaObjective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Backbone learning rate.
    pub alpha: f64,
    /// WPN learning rate.
    pub beta: f64,
    /// WPN update interval, in mini-batches.
    pub interval: u64,
    /// Budget controller used for meta-data allocation.
    pub q: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variant: VariantKind,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cap on weight-loss scatter points logged per epoch.
    pub scatter_points: usize,
    /// Scatter points are logged every this many epochs (and on the last one).
    pub scatter_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-4,
            interval: 1,
            q: 0.75,
            epochs: 100,
            batch_size: 64,
            variant: VariantKind::L2w,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            scatter_points: 2000,
            scatter_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("learning rates alpha and beta must be positive".into()));
        }
        if self.interval == 0 {
            return Err(Error::Config("interval must be >= 1".into()));
        }
        if !(self.q > 0.0) {
            return Err(Error::Config("budget q must be positive".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay >= 0".into()));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Backbone learning rate at mini-batch `t` of `total`.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.alpha,
            LrSchedule::Cosine => {
                if total == 0 {
                    self.alpha
                } else {
                    0.5 * self.alpha * (1.0 + (PI * t as f64 / total as f64).cos())
                }
            }
        }
    }

    /// Whether mini-batch `t` (0-based) updates the WPN: the I-th, 2I-th, ...
    pub fn updates_wpn(&self, t: u64) -> bool {
        (t + 1) % self.interval == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub backbone: BackboneParams,
    pub sgd: SgdState,
    pub wpn: WpnParams,
    pub adam: AdamState,
    /// Mini-batches processed so far.
    pub iteration: u64,
    pub epoch: u64,
}

impl TrainState {
    pub fn init(backbone: &BackboneConfig, wpn: &WpnConfig, seed: u64) -> Result<Self> {
        if wpn.num_exits != backbone.num_exits() {
            return Err(Error::Config(format!(
                "WPN has {} exits, backbone has {}",
                wpn.num_exits,
                backbone.num_exits()
            )));
        }
        let backbone = init_params(backbone, &mut RngStream::child(seed, "init"))?;
        let wpn = WpnParams::init(wpn.clone(), &mut RngStream::child(seed, "wpn-init"))?;
        let adam = AdamState::new(wpn.num_params());
        Ok(Self {
            backbone,
            sgd: SgdState::default(),
            wpn,
            adam,
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        BackboneParams::from_values(self.backbone.config().clone(), self.backbone.values().to_vec())?;
        WpnParams::from_values(self.wpn.config().clone(), self.wpn.values().to_vec())?;
        let p = self.wpn.num_params();
        if self.adam.m.len() != p || self.adam.v.len() != p {
            return Err(Error::Shape("Adam moments do not match the WPN".into()));
        }
        if let Some(v) = &self.sgd.velocity {
            if v.len() != self.backbone.num_params() {
                return Err(Error::Shape("momentum buffer does not match the backbone".into()));
            }
        }
        if self.wpn.config().num_exits != self.backbone.config().num_exits() {
            return Err(Error::Shape("WPN and backbone disagree on the number of exits".into()));
        }
        Ok(())
    }
}

/// Borrowed half of a mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a Matrix, y: &'a [usize]) -> Self {
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// First and second halves of a mini-batch.
pub fn split_batch(x: &Matrix, y: &[usize]) -> Result<((Matrix, Vec<usize>), (Matrix, Vec<usize>))> {
    let b = y.len();
    if b != x.rows() {
        return Err(Error::Shape(format!("{} rows but {b} labels", x.rows())));
    }
    if b < 2 || b % 2 != 0 {
        return Err(Error::Config(format!("mini-batch of {b} cannot be halved")));
    }
    let h = b / 2;
    let first: Vec<usize> = (0..h).collect();
    let second: Vec<usize> = (h..b).collect();
    Ok((
        (x.select_rows(&first), y[..h].to_vec()),
        (x.select_rows(&second), y[h..].to_vec()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaObjectiveKind {
    /// Each exit's mean loss over its own allocated subset.
    Allocated,
    /// Each exit's mean loss over the whole meta half.
    WholeSet,
}

/// How a substep deviates from plain L2W.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubstepMode {
    pub objective: MetaObjectiveKind,
    pub update_wpn: bool,
}

impl SubstepMode {
    pub const L2W: SubstepMode = SubstepMode {
        objective: MetaObjectiveKind::Allocated,
        update_wpn: true,
    };
}

/// Meta loss and the `B x K` coefficient table of its gradient: entry (j, k)
/// is `1/N_k` when sample j is allocated to exit k, zero otherwise. Empty
/// subsets contribute nothing.
pub fn meta_objective(outputs: &ExitOutputs, allocation: &AllocationResult) -> Result<(f64, Matrix)> {
    let n = outputs.batch_size();
    let k_exits = outputs.num_exits();
    if allocation.subsets.len() != k_exits {
        return Err(Error::Shape(format!(
            "allocation has {} subsets for {k_exits} exits",
            allocation.subsets.len()
        )));
    }
    let total: usize = allocation.subsets.iter().map(Vec::len).sum();
    if total != n || allocation.subsets.iter().flatten().any(|&j| j >= n) {
        return Err(Error::Shape(format!(
            "allocation covers {total} samples, meta outputs have {n}"
        )));
    }
    let mut mask = Matrix::zeros(n, k_exits);
    let mut value = 0.0;
    for (k, subset) in allocation.subsets.iter().enumerate() {
        if subset.is_empty() {
            continue;
        }
        let inv = 1.0 / subset.len() as f64;
        let mut s = 0.0;
        for &j in subset {
            s += outputs.losses.get(j, k);
            mask.set(j, k, inv);
        }
        value += s * inv;
    }
    Ok((value, mask))
}

/// Objective where every exit is scored on the whole meta half.
pub fn whole_set_objective(outputs: &ExitOutputs) -> (f64, Matrix) {
    let n = outputs.batch_size();
    let k_exits = outputs.num_exits();
    let inv = 1.0 / n as f64;
    let mask = Matrix::from_vec(n, k_exits, vec![inv; n * k_exits]).expect("shape");
    let mut value = 0.0;
    for k in 0..k_exits {
        let mut s = 0.0;
        for j in 0..n {
            s += outputs.losses.get(j, k);
        }
        value += s * inv;
    }
    (value, mask)
}

/// What one substep did, for logging and tests.
#[derive(Debug, Clone)]
pub struct SubstepReport {
    pub train_losses: Matrix,
    pub train_confidences: Matrix,
    /// Weights used for the real backbone update.
    pub weights: WeightMatrix,
    pub allocation: Option<AllocationResult>,
    pub meta_loss: Option<f64>,
    /// Gradient of the meta loss w.r.t. the WPN parameters, when computed.
    pub wpn_grad: Option<Vec<f64>>,
    /// Gradient of the meta loss w.r.t. the training weights, when computed.
    pub weight_grad: Option<Matrix>,
    /// Backbone gradient handed to the SGD step.
    pub backbone_grad: Vec<f64>,
}

fn training_error(iteration: u64, err: Error) -> Error {
    match err {
        Error::Numeric(reason) => Error::Training { iteration, reason },
        other => other,
    }
}

/// One train/meta substep. `update_now` gates the WPN update for this
/// mini-batch (the interval test is the caller's job).
pub fn l2w_substep(
    cfg: &TrainConfig,
    state: &mut TrainState,
    train: Batch<'_>,
    meta: Batch<'_>,
    lr: f64,
    mode: SubstepMode,
    update_now: bool,
) -> Result<SubstepReport> {
    let t = state.iteration;
    let delta = state.wpn.config().delta;
    let (train_out, grads) = forward_and_grads(&state.backbone, train.x, train.y).map_err(|e| training_error(t, e))?;
    let (raw, fcache) = wpn_forward(&state.wpn, &train_out.losses)?;
    let (_, weights, wcache) = make_weights(&raw, delta)?;

    let mut allocation = None;
    let mut meta_loss = None;
    let mut wpn_grad = None;
    let mut weight_grad = None;
    let weights = if mode.update_wpn && update_now {
        let pseudo = pseudo_step(&state.backbone, &grads, weights.matrix(), lr)?;
        let meta_out = forward_all(&pseudo, meta.x, meta.y).map_err(|e| training_error(t, e))?;
        let (value, mask) = match mode.objective {
            MetaObjectiveKind::Allocated => {
                let alloc = allocate_meta(&meta_out.confidences, cfg.q)?;
                let out = meta_objective(&meta_out, &alloc)?;
                allocation = Some(alloc);
                out
            }
            MetaObjectiveKind::WholeSet => whole_set_objective(&meta_out),
        };
        let meta_grad = loss_grad(&pseudo, meta.x, meta.y, &mask)?;
        let dw = meta_weight_grad(&grads, &meta_grad, lr, train.len())?;
        let g = wpn_backward(&state.wpn, &fcache, &wcache, &dw)?;
        let updated = adam_step(state.wpn.values(), &g, &mut state.adam, cfg.beta, &AdamConfig::default())?;
        state.wpn.values_mut().copy_from_slice(&updated);
        meta_loss = Some(value);
        wpn_grad = Some(g);
        weight_grad = Some(dw);

        let (raw, _) = wpn_forward(&state.wpn, &train_out.losses)?;
        make_weights(&raw, delta)?.1
    } else {
        weights
    };

    let backbone_grad = grad_weighted_loss(&grads, weights.matrix())?;
    state.backbone = sgd_step(&state.backbone, &backbone_grad, lr, &cfg.sgd(), &mut state.sgd)?;
    if !state.backbone.values().iter().all(|v| v.is_finite()) {
        return Err(Error::Training {
            iteration: t,
            reason: "backbone parameters became non-finite".into(),
        });
    }
    Ok(SubstepReport {
        train_losses: train_out.losses.clone(),
        train_confidences: train_out.confidences.clone(),
        weights,
        allocation,
        meta_loss,
        wpn_grad,
        weight_grad,
        backbone_grad,
    })
}

/// One backbone step on `batch` with a fixed weight table, through the same
/// per-sample-gradient path the weighted substeps use.
pub fn fixed_weight_step(cfg: &TrainConfig, state: &mut TrainState, batch: Batch<'_>, weights: &Matrix, lr: f64) -> Result<SubstepReport> {
    let t = state.iteration;
    let (out, grads) = forward_and_grads(&state.backbone, batch.x, batch.y).map_err(|e| training_error(t, e))?;
    let backbone_grad = grad_weighted_loss(&grads, weights)?;
    state.backbone = sgd_step(&state.backbone, &backbone_grad, lr, &cfg.sgd(), &mut state.sgd)?;
    if !state.backbone.values().iter().all(|v| v.is_finite()) {
        return Err(Error::Training {
            iteration: t,
            reason: "backbone parameters became non-finite".into(),
        });
    }
    Ok(SubstepReport {
        train_losses: out.losses.clone(),
        train_confidences: out.confidences.clone(),
        weights: WeightMatrix(weights.clone()),
        allocation: None,
        meta_loss: None,
        wpn_grad: None,
        weight_grad: None,
        backbone_grad,
    })
}

/// Per-exit constant weights evenly spaced from 0.6 to 1.4.
pub fn fixed_exit_weights(num_exits: usize, ascending: bool) -> Vec<f64> {
    if num_exits == 1 {
        return vec![1.0];
    }
    let step = 0.8 / (num_exits - 1) as f64;
    let mut w: Vec<f64> = (0..num_exits).map(|k| 0.6 + step * k as f64).collect();
    if !ascending {
        w.reverse();
    }
    w
}

fn tile_exit_weights(rows: usize, per_exit: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(rows, per_exit.len());
    for i in 0..rows {
        m.row_mut(i).copy_from_slice(per_exit);
    }
    m
}

/// Weights that make the weighted objective equal "each exit's mean loss on
/// its allocated training samples": `w = B * mask`.
pub fn selection_weights(confidences: &Matrix, q: f64) -> Result<(Matrix, AllocationResult)> {
    let alloc = allocate_meta(confidences, q)?;
    let b = confidences.rows() as f64;
    let mut w = Matrix::zeros(confidences.rows(), confidences.cols());
    for (k, subset) in alloc.subsets.iter().enumerate() {
        if subset.is_empty() {
            continue;
        }
        let v = b / subset.len() as f64;
        for &j in subset {
            w.set(j, k, v);
        }
    }
    Ok((w, alloc))
}

/// Per-mini-batch outcome.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub substeps: Vec<SubstepReport>,
    pub wpn_updates: usize,
    pub backbone_updates: usize,
}

/// Chunk-and-swap L2W step: substep(train = A, meta = B), then
/// substep(train = B, meta = A).
pub fn train_step_l2w(cfg: &TrainConfig, state: &mut TrainState, x: &Matrix, y: &[usize], lr: f64) -> Result<StepReport> {
    train_step_with_mode(cfg, state, x, y, lr, SubstepMode::L2W)
}

fn train_step_with_mode(cfg: &TrainConfig, state: &mut TrainState, x: &Matrix, y: &[usize], lr: f64, mode: SubstepMode) -> Result<StepReport> {
    let ((xa, ya), (xb, yb)) = split_batch(x, y)?;
    let update_now = cfg.updates_wpn(state.iteration);
    let first = l2w_substep(cfg, state, Batch::new(&xa, &ya), Batch::new(&xb, &yb), lr, mode, update_now)?;
    let second = l2w_substep(cfg, state, Batch::new(&xb, &yb), Batch::new(&xa, &ya), lr, mode, update_now)?;
    state.iteration += 1;
    let wpn_updates = [&first, &second].iter().filter(|r| r.wpn_grad.is_some()).count();
    Ok(StepReport {
        substeps: vec![first, second],
        wpn_updates,
        backbone_updates: 2,
    })
}

/// One mini-batch step for any variant.
pub fn train_step_variant(cfg: &TrainConfig, state: &mut TrainState, x: &Matrix, y: &[usize], lr: f64) -> Result<StepReport> {
    let k_exits = state.backbone.config().num_exits();
    let single = |report: SubstepReport, state: &mut TrainState| {
        state.iteration += 1;
        StepReport {
            substeps: vec![report],
            wpn_updates: 0,
            backbone_updates: 1,
        }
    };
    match &cfg.variant {
        VariantKind::L2w => train_step_with_mode(cfg, state, x, y, lr, SubstepMode::L2W),
        VariantKind::VanillaMetaObjective => train_step_with_mode(
            cfg,
            state,
            x,
            y,
            lr,
            SubstepMode {
                objective: MetaObjectiveKind::WholeSet,
                update_wpn: true,
            },
        ),
        VariantKind::FrozenWpn { .. } => train_step_with_mode(
            cfg,
            state,
            x,
            y,
            lr,
            SubstepMode {
                objective: MetaObjectiveKind::Allocated,
                update_wpn: false,
            },
        ),
        VariantKind::Baseline => {
            let ones = Matrix::from_vec(y.len(), k_exits, vec![1.0; y.len() * k_exits])?;
            let r = fixed_weight_step(cfg, state, Batch::new(x, y), &ones, lr)?;
            Ok(single(r, state))
        }
        VariantKind::FixedWeightsAscending | VariantKind::FixedWeightsDescending => {
            let ascending = matches!(cfg.variant, VariantKind::FixedWeightsAscending);
            let w = tile_exit_weights(y.len(), &fixed_exit_weights(k_exits, ascending));
            let r = fixed_weight_step(cfg, state, Batch::new(x, y), &w, lr)?;
            Ok(single(r, state))
        }
        VariantKind::VanillaSelection => {
            let out = forward_all(&state.backbone, x, y).map_err(|e| training_error(state.iteration, e))?;
            let (w, alloc) = selection_weights(&out.confidences, cfg.q)?;
            let mut r = fixed_weight_step(cfg, state, Batch::new(x, y), &w, lr)?;
            r.allocation = Some(alloc);
            Ok(single(r, state))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Mean training loss per exit over the mini-batch.
    pub mean_loss: Vec<f64>,
    pub weight_mean: Vec<f64>,
    pub weight_min: Vec<f64>,
    pub weight_max: Vec<f64>,
    /// Allocation sizes summed over the substeps that allocated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allocation_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_loss: Option<f64>,
    pub wpn_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Whole-set accuracy of every exit on the validation split.
    pub anytime_accuracy: Vec<f64>,
    /// Early-exit accuracy at the training budget, thresholds calibrated on
    /// the validation split itself.
    pub dynamic_accuracy: f64,
    pub dynamic_mul_adds: f64,
    pub exit_counts: Vec<usize>,
}

/// One weight-loss point of a training sample at one exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub epoch: u64,
    pub iteration: u64,
    pub exit: usize,
    pub loss: f64,
    pub weight: f64,
    /// Whether allocation on the training half would send the sample to
    /// exit 1.
    pub selected_by_exit1: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub scatter: Vec<ScatterPoint>,
}

fn summarize(report: &StepReport, iteration: u64, epoch: u64, lr: f64, k_exits: usize) -> IterationRecord {
    let mut loss_sum = vec![0.0; k_exits];
    let mut w_sum = vec![0.0; k_exits];
    let mut w_min = vec![f64::INFINITY; k_exits];
    let mut w_max = vec![f64::NEG_INFINITY; k_exits];
    let mut rows = 0usize;
    let mut sizes: Option<Vec<usize>> = None;
    let mut meta = Vec::new();
    for sub in &report.substeps {
        let w = sub.weights.matrix();
        for i in 0..sub.train_losses.rows() {
            for k in 0..k_exits {
                loss_sum[k] += sub.train_losses.get(i, k);
                let wv = w.get(i, k);
                w_sum[k] += wv;
                w_min[k] = w_min[k].min(wv);
                w_max[k] = w_max[k].max(wv);
            }
        }
        rows += sub.train_losses.rows();
        if let Some(a) = &sub.allocation {
            let acc = sizes.get_or_insert_with(|| vec![0; k_exits]);
            for (s, n) in acc.iter_mut().zip(&a.sizes) {
                *s += n;
            }
        }
        if let Some(m) = sub.meta_loss {
            meta.push(m);
        }
    }
    let n = rows.max(1) as f64;
    IterationRecord {
        iteration,
        epoch,
        lr,
        mean_loss: loss_sum.iter().map(|s| s / n).collect(),
        weight_mean: w_sum.iter().map(|s| s / n).collect(),
        weight_min: w_min,
        weight_max: w_max,
        allocation_sizes: sizes,
        meta_loss: if meta.is_empty() {
            None
        } else {
            Some(meta.iter().sum::<f64>() / meta.len() as f64)
        },
        wpn_updates: report.wpn_updates,
    }
}

fn push_scatter(report: &StepReport, cfg: &TrainConfig, iteration: u64, epoch: u64, budget: &mut usize, out: &mut Vec<ScatterPoint>) -> Result<()> {
    for sub in &report.substeps {
        if *budget == 0 {
            return Ok(());
        }
        let selected = allocate_meta(&sub.train_confidences, cfg.q)?.exit_of(sub.train_losses.rows());
        let w = sub.weights.matrix();
        for i in 0..sub.train_losses.rows() {
            for k in 0..sub.train_losses.cols() {
                if *budget == 0 {
                    return Ok(());
                }
                out.push(ScatterPoint {
                    epoch,
                    iteration,
                    exit: k,
                    loss: sub.train_losses.get(i, k),
                    weight: w.get(i, k),
                    selected_by_exit1: selected[i] == 0,
                });
                *budget -= 1;
            }
        }
    }
    Ok(())
}

/// Runs the whole set through the backbone.
pub fn evaluate(params: &BackboneParams, data: &Dataset) -> Result<ExitOutputs> {
    forward_all(params, &data.features, &data.labels)
}

/// Anytime accuracy per exit plus dynamic accuracy at budget `q`, calibrating
/// on `calib` and testing on `test`.
pub fn dynamic_summary(calib: &ExitOutputs, test: &ExitOutputs, q: f64, costs: &CostModel) -> Result<(f64, f64, Vec<usize>)> {
    let thresholds = calibrate_thresholds(&calib.confidences, q)?;
    let decisions = dynamic_infer(test, &thresholds)?;
    let counts = exit_counts(&decisions, test.num_exits());
    let acc = decisions.iter().filter(|d| d.correct).count() as f64 / decisions.len() as f64;
    Ok((acc, expected_cost(&counts, costs)?, counts))
}

/// Loads the WPN parameters of a frozen-WPN run.
pub fn load_frozen_wpn(path: &std::path::Path, expected: &WpnConfig) -> Result<WpnParams> {
    let ckpt = Checkpoint::load(path)?;
    let wpn = ckpt.state.wpn;
    if wpn.config().num_exits != expected.num_exits {
        return Err(Error::Compatibility(format!(
            "frozen WPN has {} exits, run has {}",
            wpn.config().num_exits,
            expected.num_exits
        )));
    }
    Ok(wpn)
}

/// Full training run. `epochs = 0` returns the initial state and an empty
/// history.
pub fn run_training(
    cfg: &TrainConfig,
    backbone_cfg: &BackboneConfig,
    wpn_cfg: &WpnConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(TrainState, History)> {
    cfg.validate()?;
    backbone_cfg.validate()?;
    wpn_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Domain("training and validation sets must be nonempty".into()));
    }
    if train.dim() != backbone_cfg.input_dim || val.dim() != backbone_cfg.input_dim {
        return Err(Error::Config(format!(
            "data has {} features, backbone expects {}",
            train.dim(),
            backbone_cfg.input_dim
        )));
    }
    let mut state = TrainState::init(backbone_cfg, wpn_cfg, cfg.seed)?;
    if let VariantKind::FrozenWpn { path } = &cfg.variant {
        state.wpn = load_frozen_wpn(path, wpn_cfg)?;
        state.adam = AdamState::new(state.wpn.num_params());
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((state, history));
    }
    let k_exits = backbone_cfg.num_exits();
    let costs = CostModel::from_mul_adds(&count_mul_adds(backbone_cfg))?;
    let per_epoch = (train.len() / cfg.batch_size) as u64;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the training set ({})",
            cfg.batch_size,
            train.len()
        )));
    }
    let total = per_epoch * cfg.epochs as u64;
    for epoch in 0..cfg.epochs as u64 {
        state.epoch = epoch;
        let batches = make_batches(train.len(), cfg.batch_size, epoch, cfg.seed, false)?;
        let log_scatter = cfg.scatter_points > 0
            && ((epoch + 1) % cfg.scatter_every.max(1) as u64 == 0 || epoch + 1 == cfg.epochs as u64);
        let mut budget = if log_scatter { cfg.scatter_points } else { 0 };
        for idx in &batches {
            let (x, y) = train.gather(idx);
            let t = state.iteration;
            let lr = cfg.lr_at(t, total);
            let report = train_step_variant(cfg, &mut state, &x, &y, lr).map_err(|e| match e {
                Error::Training { iteration, reason } => Error::Training {
                    iteration,
                    reason: format!("epoch {epoch}: {reason}"),
                },
                other => other,
            })?;
            history.iterations.push(summarize(&report, t, epoch, lr, k_exits));
            if budget > 0 {
                push_scatter(&report, cfg, t, epoch, &mut budget, &mut history.scatter)?;
            }
        }
        let val_out = evaluate(&state.backbone, val)?;
        let (dynamic_accuracy, dynamic_mul_adds, counts) = dynamic_summary(&val_out, &val_out, cfg.q, &costs)?;
        history.epochs.push(EpochRecord {
            epoch,
            anytime_accuracy: val_out.exit_accuracies(),
            dynamic_accuracy,
            dynamic_mul_adds,
            exit_counts: counts,
        });
    }
    state.epoch = cfg.epochs as u64;
    Ok((state, history))
}

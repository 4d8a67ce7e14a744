//! Finite-difference verification of the analytic gradients.
//!
//! Four suites:
//! - `backbone`: every per-sample, per-exit backbone gradient;
//! - `meta_weight_grad`: `dL_meta/dw` through pseudo step + meta loss;
//! - `wpn_backward`: `dL/dtheta_g` for a fixed linear probe on the weights;
//! - `end_to_end`: `dL_meta/dtheta_g` as produced inside a training substep.
//!
//! The meta loss is evaluated with the allocation frozen at the unperturbed
//! point. Central differences that would straddle a ReLU kink (the on/off
//! pattern changes between the probes) are retried with a smaller step.
//! Errors are norm-wise: `|a - f| / max(|a|, |f|, 1e-10)` per gradient
//! vector.

use serde::{Deserialize, Serialize};

use crate::backbone::{activation_pattern, forward_all, forward_and_grads, init_params, pseudo_step, BackboneConfig, BackboneParams, PerSampleGrads};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};
use crate::trainer::{l2w_substep, Batch, SubstepMode, TrainConfig, TrainState};
use crate::wpn::{make_weights, wpn_backward, wpn_forward, AdamState, WpnConfig, WpnParams};

pub const BACKBONE_TOLERANCE: f64 = 1e-5;
pub const META_TOLERANCE: f64 = 1e-4;
/// Largest backbone the checker accepts.
pub const MAX_BACKBONE_PARAMS: usize = 2000;

const NORM_FLOOR: f64 = 1e-10;
const MAX_STEP_HALVINGS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of gradient vectors compared.
    pub checks: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// Test hook: deliberately corrupt one analytic gradient so the harness can
/// prove it notices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Sabotage {
    #[default]
    None,
    FlipMetaWeightSign,
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Central difference of `f` at 0. `f(h)` returns the value and the
/// activation pattern at offset `h`.
pub fn central_difference(f: impl Fn(f64) -> (f64, Vec<bool>), step: f64) -> f64 {
    let (_, base) = f(0.0);
    let mut h = step;
    for _ in 0..MAX_STEP_HALVINGS {
        let (up, pu) = f(h);
        let (dn, pd) = f(-h);
        if pu == base && pd == base {
            return (up - dn) / (2.0 * h);
        }
        h /= 10.0;
    }
    let (up, _) = f(h);
    let (dn, _) = f(-h);
    (up - dn) / (2.0 * h)
}

/// Random backbone, WPN and train/meta halves.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub backbone: BackboneParams,
    pub wpn: WpnParams,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub meta_x: Matrix,
    pub meta_y: Vec<usize>,
    pub lr: f64,
    pub q: f64,
}

impl GradcheckCase {
    pub fn random(backbone: &BackboneConfig, wpn: &WpnConfig, half_batch: usize, lr: f64, q: f64, seed: u64) -> Result<Self> {
        if backbone.num_params() > MAX_BACKBONE_PARAMS {
            return Err(Error::Config(format!(
                "gradient checks need a backbone with at most {MAX_BACKBONE_PARAMS} parameters, this one has {}",
                backbone.num_params()
            )));
        }
        if half_batch == 0 {
            return Err(Error::Config("half batch must be positive".into()));
        }
        let mut rng = RngStream::child(seed, "gradcheck");
        let mut params = init_params(backbone, &mut rng)?;
        // Zero biases put units behind a dead layer exactly on the ReLU kink.
        for slot in &backbone.layout().blocks {
            for v in &mut params.values_mut()[slot.bias()] {
                *v = rng.uniform_range(-0.1, 0.1);
            }
        }
        let wpn = WpnParams::init(wpn.clone(), &mut rng)?;
        let mut draw = |n: usize| -> (Matrix, Vec<usize>) {
            let x = (0..n * backbone.input_dim).map(|_| rng.normal()).collect();
            let y = (0..n).map(|_| rng.below(backbone.num_classes as u64) as usize).collect();
            (Matrix::from_vec(n, backbone.input_dim, x).expect("shape"), y)
        };
        let (train_x, train_y) = draw(half_batch);
        let (meta_x, meta_y) = draw(half_batch);
        Ok(Self {
            backbone: params,
            wpn,
            train_x,
            train_y,
            meta_x,
            meta_y,
            lr,
            q,
        })
    }

    fn state(&self) -> TrainState {
        TrainState {
            backbone: self.backbone.clone(),
            sgd: Default::default(),
            wpn: self.wpn.clone(),
            adam: AdamState::new(self.wpn.num_params()),
            iteration: 0,
            epoch: 0,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.lr,
            q: self.q,
            ..TrainConfig::default()
        }
    }
}

/// Allocation-frozen meta loss at the pseudo parameters for weights `w`,
/// plus the activation pattern of the pseudo backbone on the meta half.
fn frozen_meta_loss(case: &GradcheckCase, grads: &PerSampleGrads, w: &Matrix, mask: &Matrix) -> Result<(f64, Vec<bool>)> {
    let pseudo = pseudo_step(&case.backbone, grads, w, case.lr)?;
    let out = forward_all(&pseudo, &case.meta_x, &case.meta_y)?;
    let mut value = 0.0;
    for j in 0..out.batch_size() {
        for k in 0..out.num_exits() {
            value += mask.get(j, k) * out.losses.get(j, k);
        }
    }
    Ok((value, activation_pattern(&pseudo, &case.meta_x)))
}

pub fn check_backbone_grads(params: &BackboneParams, x: &Matrix, y: &[usize]) -> Result<SuiteReport> {
    let (out, grads) = forward_and_grads(params, x, y)?;
    let p = params.num_params();
    let mut worst: f64 = 0.0;
    for i in 0..out.batch_size() {
        let xi = x.select_rows(&[i]);
        let yi = [y[i]];
        for k in 0..out.num_exits() {
            let mut numeric = vec![0.0; p];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let step = 1e-5 * params.values()[j].abs().max(1.0);
                *slot = central_difference(
                    |h| {
                        let mut bumped = params.clone();
                        bumped.values_mut()[j] += h;
                        let o = forward_all(&bumped, &xi, &yi).expect("forward");
                        (o.losses.get(0, k), activation_pattern(&bumped, &xi))
                    },
                    step,
                );
            }
            worst = worst.max(rel_err(grads.grad(i, k), &numeric));
        }
    }
    Ok(SuiteReport {
        name: "backbone".into(),
        max_rel_err: worst,
        tolerance: BACKBONE_TOLERANCE,
        checks: out.batch_size() * out.num_exits(),
    })
}

/// Runs one L2W substep on a copy of the case and returns its report
/// alongside the per-sample gradients and the meta mask it used.
fn substep_artifacts(case: &GradcheckCase) -> Result<(crate::trainer::SubstepReport, PerSampleGrads, Matrix)> {
    let mut state = case.state();
    let cfg = case.train_config();
    let report = l2w_substep(
        &cfg,
        &mut state,
        Batch::new(&case.train_x, &case.train_y),
        Batch::new(&case.meta_x, &case.meta_y),
        case.lr,
        SubstepMode::L2W,
        true,
    )?;
    let (_, grads) = forward_and_grads(&case.backbone, &case.train_x, &case.train_y)?;
    let alloc = report.allocation.clone().expect("L2W substep allocates");
    let mut mask = Matrix::zeros(case.meta_y.len(), case.backbone.config().num_exits());
    for (k, subset) in alloc.subsets.iter().enumerate() {
        for &j in subset {
            mask.set(j, k, 1.0 / subset.len() as f64);
        }
    }
    Ok((report, grads, mask))
}

fn initial_weights(case: &GradcheckCase) -> Result<Matrix> {
    let (out, _) = forward_and_grads(&case.backbone, &case.train_x, &case.train_y)?;
    let (raw, _) = wpn_forward(&case.wpn, &out.losses)?;
    Ok(make_weights(&raw, case.wpn.config().delta)?.1 .0)
}

pub fn check_meta_weight_grad(case: &GradcheckCase, sabotage: Sabotage) -> Result<SuiteReport> {
    let (report, grads, mask) = substep_artifacts(case)?;
    let mut analytic = report.weight_grad.expect("weights gradient").into_data();
    if sabotage == Sabotage::FlipMetaWeightSign {
        let largest = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap_or(0);
        analytic[largest] = -analytic[largest];
    }
    let w0 = initial_weights(case)?;
    let mut numeric = vec![0.0; analytic.len()];
    for (e, slot) in numeric.iter_mut().enumerate() {
        *slot = central_difference(
            |h| {
                let mut w = w0.clone();
                w.data_mut()[e] += h;
                frozen_meta_loss(case, &grads, &w, &mask).expect("meta loss")
            },
            1e-4,
        );
    }
    Ok(SuiteReport {
        name: "meta_weight_grad".into(),
        max_rel_err: rel_err(&analytic, &numeric),
        tolerance: META_TOLERANCE,
        checks: 1,
    })
}

pub fn check_wpn_backward(case: &GradcheckCase, seed: u64) -> Result<SuiteReport> {
    let (out, _) = forward_and_grads(&case.backbone, &case.train_x, &case.train_y)?;
    let losses = out.losses;
    let delta = case.wpn.config().delta;
    let mut rng = RngStream::child(seed, "probe");
    let probe = Matrix::from_vec(
        losses.rows(),
        losses.cols(),
        (0..losses.rows() * losses.cols()).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    )?;
    let (raw, fc) = wpn_forward(&case.wpn, &losses)?;
    let (_, _, wc) = make_weights(&raw, delta)?;
    let analytic = wpn_backward(&case.wpn, &fc, &wc, &probe)?;
    let numeric: Vec<f64> = (0..case.wpn.num_params())
        .map(|j| {
            central_difference(
                |h| {
                    let mut p = case.wpn.clone();
                    p.values_mut()[j] += h;
                    let (raw, fc) = wpn_forward(&p, &losses).expect("wpn");
                    let (_, w, _) = make_weights(&raw, delta).expect("weights");
                    let v = w.0.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
                    (v, fc.activation_pattern())
                },
                1e-4,
            )
        })
        .collect();
    Ok(SuiteReport {
        name: "wpn_backward".into(),
        max_rel_err: rel_err(&analytic, &numeric),
        tolerance: META_TOLERANCE,
        checks: 1,
    })
}

pub fn check_end_to_end(case: &GradcheckCase) -> Result<SuiteReport> {
    let (report, grads, mask) = substep_artifacts(case)?;
    let analytic = report.wpn_grad.expect("WPN gradient");
    let (out, _) = forward_and_grads(&case.backbone, &case.train_x, &case.train_y)?;
    let losses = out.losses;
    let delta = case.wpn.config().delta;
    let numeric: Vec<f64> = (0..case.wpn.num_params())
        .map(|j| {
            central_difference(
                |h| {
                    let mut p = case.wpn.clone();
                    p.values_mut()[j] += h;
                    let (raw, fc) = wpn_forward(&p, &losses).expect("wpn");
                    let (_, w, _) = make_weights(&raw, delta).expect("weights");
                    let (v, mut pattern) = frozen_meta_loss(case, &grads, &w.0, &mask).expect("meta loss");
                    pattern.extend(fc.activation_pattern());
                    (v, pattern)
                },
                1e-4,
            )
        })
        .collect();
    Ok(SuiteReport {
        name: "end_to_end".into(),
        max_rel_err: rel_err(&analytic, &numeric),
        tolerance: META_TOLERANCE,
        checks: 1,
    })
}

/// All four suites on one case.
pub fn run_all(case: &GradcheckCase, seed: u64, sabotage: Sabotage) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        check_backbone_grads(&case.backbone, &case.train_x, &case.train_y)?,
        check_meta_weight_grad(case, sabotage)?,
        check_wpn_backward(case, seed)?,
        check_end_to_end(case)?,
    ])
}

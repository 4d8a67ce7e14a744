//! The K-exit classifier.
//!
//! A stack of K affine+ReLU trunk blocks; exit head k is an affine classifier
//! reading the activation of block k. Sub-network k is blocks 1..=k plus head
//! k, so trunk parameters are shared in a nested way while heads are private.
//!
//! All parameters live in one flat vector. Trunk blocks come first, in depth
//! order, followed by the heads. Each affine slot stores its weight matrix
//! (out x in, row-major) and then its bias.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cross_entropy_unchecked, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    /// Hidden width of each trunk block; one exit per block.
    pub trunk_widths: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, trunk_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        let config = Self {
            input_dim,
            trunk_widths,
            num_classes,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn num_exits(&self) -> usize {
        self.trunk_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_widths.is_empty() {
            return Err(Error::Config("backbone needs at least one exit".into()));
        }
        if self.input_dim == 0 || self.trunk_widths.contains(&0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineSlot {
    pub offset: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineSlot {
    pub fn weight(&self) -> Range<usize> {
        self.offset..self.offset + self.in_dim * self.out_dim
    }

    pub fn bias(&self) -> Range<usize> {
        let start = self.offset + self.in_dim * self.out_dim;
        start..start + self.out_dim
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + (self.in_dim + 1) * self.out_dim
    }

    pub fn len(&self) -> usize {
        (self.in_dim + 1) * self.out_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<AffineSlot>,
    pub heads: Vec<AffineSlot>,
    pub total: usize,
}

impl ParamLayout {
    fn new(config: &BackboneConfig) -> Self {
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(config.num_exits());
        let mut in_dim = config.input_dim;
        for &w in &config.trunk_widths {
            let slot = AffineSlot {
                offset,
                in_dim,
                out_dim: w,
            };
            offset += slot.len();
            blocks.push(slot);
            in_dim = w;
        }
        let mut heads = Vec::with_capacity(config.num_exits());
        for &w in &config.trunk_widths {
            let slot = AffineSlot {
                offset,
                in_dim: w,
                out_dim: config.num_classes,
            };
            offset += slot.len();
            heads.push(slot);
        }
        Self {
            blocks,
            heads,
            total: offset,
        }
    }

    /// Parameter ranges that can be nonzero in a gradient of exit `k`'s loss:
    /// the trunk prefix through block `k` and head `k`.
    pub fn exit_support(&self, k: usize) -> [Range<usize>; 2] {
        [0..self.blocks[k].range().end, self.heads[k].range()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    config: BackboneConfig,
    values: Vec<f64>,
}

impl BackboneParams {
    pub fn from_values(config: BackboneConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.num_params();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "backbone expects {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { config, values })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let n = config.num_params();
        Self::from_values(config, vec![0.0; n])
    }

    pub fn config(&self) -> &BackboneConfig {
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

    pub fn layout(&self) -> ParamLayout {
        self.config.layout()
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            config: self.config.clone(),
            values,
        }
    }
}

/// He-normal trunk weights, fan-in-scaled normal head weights, zero biases.
pub fn init_params(config: &BackboneConfig, rng: &mut RngStream) -> Result<BackboneParams> {
    config.validate()?;
    let layout = config.layout();
    let mut values = vec![0.0; layout.total];
    for slot in &layout.blocks {
        let std = (2.0 / slot.in_dim as f64).sqrt();
        for v in &mut values[slot.weight()] {
            *v = std * rng.normal();
        }
    }
    for slot in &layout.heads {
        let std = (1.0 / slot.in_dim as f64).sqrt();
        for v in &mut values[slot.weight()] {
            *v = std * rng.normal();
        }
    }
    BackboneParams::from_values(config.clone(), values)
}

/// Per-sample, per-exit forward results. Tables are stored flat, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs {
    batch: usize,
    num_exits: usize,
    num_classes: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
    /// B x K table of per-exit cross-entropy losses.
    pub losses: Matrix,
    /// B x K table of per-exit max probabilities.
    pub confidences: Matrix,
    predictions: Vec<usize>,
    labels: Vec<usize>,
}

impl ExitOutputs {
    /// Outputs from precomputed logits, laid out `[sample][exit][class]`.
    pub fn from_logits(num_exits: usize, num_classes: usize, logits: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let batch = labels.len();
        if num_exits == 0 || num_classes < 2 || logits.len() != batch * num_exits * num_classes {
            return Err(Error::Shape(format!(
                "{} logits for {batch} samples, {num_exits} exits and {num_classes} classes",
                logits.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Shape(format!("label {y} out of range for {num_classes} classes")));
        }
        if !logits.iter().all(|z| z.is_finite()) {
            return Err(Error::Numeric("logits must be finite".into()));
        }
        let mut probs = Vec::with_capacity(logits.len());
        let mut losses = Matrix::zeros(batch, num_exits);
        let mut confidences = Matrix::zeros(batch, num_exits);
        let mut predictions = Vec::with_capacity(batch * num_exits);
        for (row, z) in logits.chunks(num_classes).enumerate() {
            let (i, k) = (row / num_exits, row % num_exits);
            let (loss, p) = cross_entropy_unchecked(z, labels[i]);
            let (arg, max) = argmax(&p);
            losses.set(i, k, loss);
            confidences.set(i, k, max);
            predictions.push(arg);
            probs.extend_from_slice(&p);
        }
        Ok(Self {
            batch,
            num_exits,
            num_classes,
            logits,
            probs,
            losses,
            confidences,
            predictions,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self, i: usize, k: usize) -> &[f64] {
        let c = self.num_classes;
        let at = (i * self.num_exits + k) * c;
        &self.logits[at..at + c]
    }

    pub fn probs(&self, i: usize, k: usize) -> &[f64] {
        let c = self.num_classes;
        let at = (i * self.num_exits + k) * c;
        &self.probs[at..at + c]
    }

    pub fn prediction(&self, i: usize, k: usize) -> usize {
        self.predictions[i * self.num_exits + k]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_correct(&self, i: usize, k: usize) -> bool {
        self.prediction(i, k) == self.labels[i]
    }

    /// Whole-set accuracy of every exit.
    pub fn exit_accuracies(&self) -> Vec<f64> {
        (0..self.num_exits)
            .map(|k| {
                let hits = (0..self.batch).filter(|&i| self.is_correct(i, k)).count();
                hits as f64 / self.batch.max(1) as f64
            })
            .collect()
    }
}

/// Activations of one sample, kept for backpropagation.
struct SampleTrace {
    /// `acts[0]` is the input, `acts[j + 1]` the output of block `j`.
    acts: Vec<Vec<f64>>,
    /// Per exit: (loss, probabilities).
    exits: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

fn affine(values: &[f64], slot: &AffineSlot, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let w = &values[slot.weight()];
    let b = &values[slot.bias()];
    for o in 0..slot.out_dim {
        let row = &w[o * slot.in_dim..(o + 1) * slot.in_dim];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(input) {
            acc += wv * xv;
        }
        out.push(acc);
    }
}

fn trace_sample(params: &BackboneParams, layout: &ParamLayout, x: &[f64], label: usize) -> SampleTrace {
    let k_exits = layout.blocks.len();
    let mut acts = Vec::with_capacity(k_exits + 1);
    acts.push(x.to_vec());
    let mut exits = Vec::with_capacity(k_exits);
    let mut buf = Vec::new();
    for k in 0..k_exits {
        affine(&params.values, &layout.blocks[k], &acts[k], &mut buf);
        let h: Vec<f64> = buf.iter().map(|&v| v.max(0.0)).collect();
        let mut logits = Vec::new();
        affine(&params.values, &layout.heads[k], &h, &mut logits);
        let (loss, probs) = cross_entropy_unchecked(&logits, label);
        exits.push((loss, probs, logits));
        acts.push(h);
    }
    SampleTrace { acts, exits }
}

fn check_batch(params: &BackboneParams, batch: &Matrix, labels: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if batch.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "batch has {} features, backbone expects {}",
            batch.cols(),
            cfg.input_dim
        )));
    }
    if batch.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} labels",
            batch.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(Error::Index(format!(
            "label {bad} with {} classes",
            cfg.num_classes
        )));
    }
    if !batch.is_finite() {
        return Err(Error::Numeric("batch contains non-finite features".into()));
    }
    Ok(())
}

fn collect_outputs(params: &BackboneParams, traces: &[SampleTrace], labels: &[usize]) -> Result<ExitOutputs> {
    let b = traces.len();
    let k_exits = params.config.num_exits();
    let c = params.config.num_classes;
    let mut logits = Vec::with_capacity(b * k_exits * c);
    let mut probs = Vec::with_capacity(b * k_exits * c);
    let mut losses = Matrix::zeros(b, k_exits);
    let mut confidences = Matrix::zeros(b, k_exits);
    let mut predictions = Vec::with_capacity(b * k_exits);
    for (i, trace) in traces.iter().enumerate() {
        for (k, (loss, p, z)) in trace.exits.iter().enumerate() {
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss of sample {i} at exit {k} is {loss}"
                )));
            }
            let (arg, max) = argmax(p);
            losses.set(i, k, *loss);
            confidences.set(i, k, max);
            predictions.push(arg);
            logits.extend_from_slice(z);
            probs.extend_from_slice(p);
        }
    }
    Ok(ExitOutputs {
        batch: b,
        num_exits: k_exits,
        num_classes: c,
        logits,
        probs,
        losses,
        confidences,
        predictions,
        labels: labels.to_vec(),
    })
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    (best, v[best])
}

/// Evaluates every exit on every sample.
pub fn forward_all(params: &BackboneParams, batch: &Matrix, labels: &[usize]) -> Result<ExitOutputs> {
    check_batch(params, batch, labels)?;
    let layout = params.layout();
    let traces: Vec<SampleTrace> = (0..batch.rows())
        .into_par_iter()
        .map(|i| trace_sample(params, &layout, batch.row(i), labels[i]))
        .collect();
    collect_outputs(params, &traces, labels)
}

/// ReLU on/off state of every trunk unit for every sample, sample-major.
/// Finite-difference checks use it to detect steps that cross a kink.
pub fn activation_pattern(params: &BackboneParams, batch: &Matrix) -> Vec<bool> {
    let layout = params.layout();
    let mut pattern = Vec::new();
    let mut buf = Vec::new();
    for i in 0..batch.rows() {
        let mut h = batch.row(i).to_vec();
        for slot in &layout.blocks {
            affine(&params.values, slot, &h, &mut buf);
            pattern.extend(buf.iter().map(|&v| v > 0.0));
            h = buf.iter().map(|&v| v.max(0.0)).collect();
        }
    }
    pattern
}

/// Dense table of per-sample, per-exit loss gradients, `B x K x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads {
    batch: usize,
    num_exits: usize,
    num_params: usize,
    layout: ParamLayout,
    data: Vec<f64>,
}

impl PerSampleGrads {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Gradient of `l_i^(k)` with respect to all backbone parameters.
    pub fn grad(&self, i: usize, k: usize) -> &[f64] {
        let at = (i * self.num_exits + k) * self.num_params;
        &self.data[at..at + self.num_params]
    }

    /// `sum_{i,k} coeffs[i][k] * grad(i, k)`, touching only each exit's support.
    pub fn contract(&self, coeffs: &Matrix) -> Result<Vec<f64>> {
        if coeffs.rows() != self.batch || coeffs.cols() != self.num_exits {
            return Err(Error::Shape(format!(
                "coefficients are {}x{}, gradients are {}x{}",
                coeffs.rows(),
                coeffs.cols(),
                self.batch,
                self.num_exits
            )));
        }
        let mut acc = vec![0.0; self.num_params];
        for i in 0..self.batch {
            for k in 0..self.num_exits {
                let w = coeffs.get(i, k);
                if w == 0.0 {
                    continue;
                }
                let g = self.grad(i, k);
                for range in self.layout.exit_support(k) {
                    for (a, gv) in acc[range.clone()].iter_mut().zip(&g[range]) {
                        *a += w * gv;
                    }
                }
            }
        }
        Ok(acc)
    }

    /// `<v, grad(i, k)>` for every (i, k), as a `B x K` table.
    pub fn project(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.num_params {
            return Err(Error::Shape(format!(
                "vector of length {} against {} parameters",
                v.len(),
                self.num_params
            )));
        }
        let mut out = Matrix::zeros(self.batch, self.num_exits);
        for i in 0..self.batch {
            for k in 0..self.num_exits {
                let g = self.grad(i, k);
                let mut acc = 0.0;
                for range in self.layout.exit_support(k) {
                    for (a, b) in v[range.clone()].iter().zip(&g[range]) {
                        acc += a * b;
                    }
                }
                out.set(i, k, acc);
            }
        }
        Ok(out)
    }
}

/// Writes `d l^(k) / d theta` for every exit of one sample into `out`
/// (`K x P`, zero-initialised).
fn backprop_sample(params: &BackboneParams, layout: &ParamLayout, trace: &SampleTrace, label: usize, out: &mut [f64]) {
    let p = layout.total;
    let values = &params.values;
    for (k, (_, probs, _)) in trace.exits.iter().enumerate() {
        let g = &mut out[k * p..(k + 1) * p];
        let mut dz = probs.clone();
        dz[label] -= 1.0;
        let dh = head_backward(values, &layout.heads[k], &trace.acts[k + 1], &dz, g);
        trunk_backward(values, layout, trace, k, dh, g);
    }
}

/// Accumulates head gradients into `g` and returns `d/d h` for the head input.
fn head_backward(values: &[f64], slot: &AffineSlot, input: &[f64], dz: &[f64], g: &mut [f64]) -> Vec<f64> {
    let w = &values[slot.weight()];
    let gw_start = slot.weight().start;
    let gb_start = slot.bias().start;
    let mut dh = vec![0.0; slot.in_dim];
    for (o, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = o * slot.in_dim;
        for u in 0..slot.in_dim {
            g[gw_start + row + u] += d * input[u];
            dh[u] += w[row + u] * d;
        }
        g[gb_start + o] += d;
    }
    dh
}

/// Backpropagates `dh` (gradient w.r.t. the output of block `top`) down to
/// the input, accumulating block gradients into `g`.
fn trunk_backward(values: &[f64], layout: &ParamLayout, trace: &SampleTrace, top: usize, mut dh: Vec<f64>, g: &mut [f64]) {
    for j in (0..=top).rev() {
        let slot = &layout.blocks[j];
        let out = &trace.acts[j + 1];
        let input = &trace.acts[j];
        let w = &values[slot.weight()];
        let gw_start = slot.weight().start;
        let gb_start = slot.bias().start;
        let mut d_in = if j > 0 { vec![0.0; slot.in_dim] } else { Vec::new() };
        for o in 0..slot.out_dim {
            // ReLU gate: the block output is exactly 0 where the unit is off.
            if out[o] <= 0.0 {
                continue;
            }
            let d = dh[o];
            if d == 0.0 {
                continue;
            }
            let row = o * slot.in_dim;
            for u in 0..slot.in_dim {
                g[gw_start + row + u] += d * input[u];
            }
            g[gb_start + o] += d;
            if j > 0 {
                for u in 0..slot.in_dim {
                    d_in[u] += w[row + u] * d;
                }
            }
        }
        dh = d_in;
    }
}

/// Exact reverse-mode gradients of every `l_i^(k)`.
pub fn per_sample_grads(params: &BackboneParams, batch: &Matrix, labels: &[usize]) -> Result<PerSampleGrads> {
    Ok(forward_and_grads(params, batch, labels)?.1)
}

/// `forward_all` and `per_sample_grads` from a single pass.
pub fn forward_and_grads(params: &BackboneParams, batch: &Matrix, labels: &[usize]) -> Result<(ExitOutputs, PerSampleGrads)> {
    check_batch(params, batch, labels)?;
    let layout = params.layout();
    let b = batch.rows();
    let k_exits = params.config.num_exits();
    let p = layout.total;
    let traces: Vec<SampleTrace> = (0..b)
        .into_par_iter()
        .map(|i| trace_sample(params, &layout, batch.row(i), labels[i]))
        .collect();
    let outputs = collect_outputs(params, &traces, labels)?;
    let mut data = vec![0.0; b * k_exits * p];
    if p > 0 && k_exits > 0 {
        data.par_chunks_mut(k_exits * p)
            .zip(traces.par_iter())
            .enumerate()
            .for_each(|(i, (chunk, trace))| backprop_sample(params, &layout, trace, labels[i], chunk));
    }
    Ok((
        outputs,
        PerSampleGrads {
            batch: b,
            num_exits: k_exits,
            num_params: p,
            layout,
            data,
        },
    ))
}

/// `sum_{i,k} coeffs[i][k] * grad l_i^(k)` without materialising per-sample
/// gradients. Samples are reduced in index order.
pub fn loss_grad(params: &BackboneParams, batch: &Matrix, labels: &[usize], coeffs: &Matrix) -> Result<Vec<f64>> {
    check_batch(params, batch, labels)?;
    let k_exits = params.config.num_exits();
    if coeffs.rows() != batch.rows() || coeffs.cols() != k_exits {
        return Err(Error::Shape(format!(
            "coefficients are {}x{}, expected {}x{}",
            coeffs.rows(),
            coeffs.cols(),
            batch.rows(),
            k_exits
        )));
    }
    let layout = params.layout();
    let mut g = vec![0.0; layout.total];
    for i in 0..batch.rows() {
        let row = coeffs.row(i);
        if row.iter().all(|&c| c == 0.0) {
            continue;
        }
        let trace = trace_sample(params, &layout, batch.row(i), labels[i]);
        let top = (0..k_exits).rev().find(|&k| row[k] != 0.0).unwrap_or(0);
        let mut dh = vec![0.0; layout.blocks[top].out_dim];
        for k in (0..=top).rev() {
            if k < top {
                dh = block_input_grad(&params.values, &layout, &trace, k + 1, &dh, &mut g);
            }
            if row[k] != 0.0 {
                let mut dz = trace.exits[k].1.clone();
                dz[labels[i]] -= 1.0;
                for d in &mut dz {
                    *d *= row[k];
                }
                let dh_head = head_backward(&params.values, &layout.heads[k], &trace.acts[k + 1], &dz, &mut g);
                for (a, b) in dh.iter_mut().zip(&dh_head) {
                    *a += b;
                }
            }
        }
        block_input_grad(&params.values, &layout, &trace, 0, &dh, &mut g);
    }
    Ok(g)
}

/// Backward through a single block `j`; returns the gradient w.r.t. its input.
fn block_input_grad(values: &[f64], layout: &ParamLayout, trace: &SampleTrace, j: usize, dh: &[f64], g: &mut [f64]) -> Vec<f64> {
    let slot = &layout.blocks[j];
    let out = &trace.acts[j + 1];
    let input = &trace.acts[j];
    let w = &values[slot.weight()];
    let gw_start = slot.weight().start;
    let gb_start = slot.bias().start;
    let mut d_in = vec![0.0; slot.in_dim];
    for o in 0..slot.out_dim {
        if out[o] <= 0.0 || dh[o] == 0.0 {
            continue;
        }
        let d = dh[o];
        let row = o * slot.in_dim;
        for u in 0..slot.in_dim {
            g[gw_start + row + u] += d * input[u];
            d_in[u] += w[row + u] * d;
        }
        g[gb_start + o] += d;
    }
    d_in
}

fn check_weights(losses: &Matrix, weights: &Matrix) -> Result<()> {
    if losses.rows() != weights.rows() || losses.cols() != weights.cols() {
        return Err(Error::Shape(format!(
            "losses are {}x{}, weights are {}x{}",
            losses.rows(),
            losses.cols(),
            weights.rows(),
            weights.cols()
        )));
    }
    if losses.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Unweighted objective: the sum over exits of each exit's mean loss.
pub fn cumulative_loss(losses: &Matrix) -> f64 {
    let n = losses.rows() as f64;
    let mut total = 0.0;
    for k in 0..losses.cols() {
        let mut s = 0.0;
        for i in 0..losses.rows() {
            s += losses.get(i, k);
        }
        total += s / n;
    }
    total
}

/// `sum_k (1/N) sum_i w_i^(k) l_i^(k)` with `N = B`.
pub fn weighted_train_loss(losses: &Matrix, weights: &Matrix) -> Result<f64> {
    check_weights(losses, weights)?;
    let n = losses.rows() as f64;
    let mut total = 0.0;
    for k in 0..losses.cols() {
        let mut s = 0.0;
        for i in 0..losses.rows() {
            s += weights.get(i, k) * losses.get(i, k);
        }
        total += s / n;
    }
    Ok(total)
}

/// Gradient of [`weighted_train_loss`]: `(1/N) sum_{i,k} w_i^(k) grad l_i^(k)`.
/// Exact, since the objective is linear in the weights with coefficients that
/// do not depend on them.
pub fn grad_weighted_loss(grads: &PerSampleGrads, weights: &Matrix) -> Result<Vec<f64>> {
    let mut g = grads.contract(weights)?;
    let inv_n = 1.0 / grads.batch_size() as f64;
    for v in &mut g {
        *v *= inv_n;
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffer; absent until the first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Option<Vec<f64>>,
}

/// Heavy-ball SGD with coupled weight decay:
/// `d = g + wd * theta; v = mu * v + d; theta -= lr * v`.
/// The first step initialises `v = d`.
pub fn sgd_step(params: &BackboneParams, grad: &[f64], lr: f64, opt: &SgdConfig, state: &mut SgdState) -> Result<BackboneParams> {
    if grad.len() != params.num_params() {
        return Err(Error::Shape(format!(
            "gradient of length {} for {} parameters",
            grad.len(),
            params.num_params()
        )));
    }
    let mut d: Vec<f64> = grad
        .iter()
        .zip(&params.values)
        .map(|(g, t)| if opt.weight_decay != 0.0 { g + opt.weight_decay * t } else { *g })
        .collect();
    if opt.momentum != 0.0 {
        match state.velocity.as_mut() {
            Some(v) => {
                for (vi, di) in v.iter_mut().zip(&d) {
                    *vi = opt.momentum * *vi + di;
                }
                d.copy_from_slice(v);
            }
            None => state.velocity = Some(d.clone()),
        }
    }
    let values = params.values.iter().zip(&d).map(|(t, s)| t - lr * s).collect();
    Ok(params.with_values(values))
}

/// Plain gradient step on the weighted objective, leaving `params` untouched
/// and ignoring any optimizer state.
pub fn pseudo_step(params: &BackboneParams, grads: &PerSampleGrads, weights: &Matrix, lr: f64) -> Result<BackboneParams> {
    if grads.num_params() != params.num_params() {
        return Err(Error::Shape("gradients were computed for another backbone".into()));
    }
    let g = grad_weighted_loss(grads, weights)?;
    let values = params.values.iter().zip(&g).map(|(t, gv)| t - lr * gv).collect();
    Ok(params.with_values(values))
}

/// Cumulative multiply-adds per sample to reach a decision at each exit.
///
/// Reaching exit k runs trunk blocks 1..=k and every head 1..=k, since the
/// earlier heads are evaluated to test their confidence first. An affine
/// layer costs `in_dim * out_dim`.
pub fn count_mul_adds(config: &BackboneConfig) -> Vec<u64> {
    let mut costs = Vec::with_capacity(config.num_exits());
    let mut in_dim = config.input_dim as u64;
    let mut running = 0u64;
    for &w in &config.trunk_widths {
        let w = w as u64;
        running += in_dim * w + w * config.num_classes as u64;
        costs.push(running);
        in_dim = w;
    }
    costs
}

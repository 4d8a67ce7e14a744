//! Where samples exit: budget fractions, greedy meta-data allocation,
//! threshold calibration, confidence-based dynamic inference and expected
//! cost.
//!
//! Allocation sizes are `N_k = floor(f_k * N)` for every exit but the last,
//! which takes the remainder. Within an exit, candidates are ranked by
//! confidence (descending) with ties broken by the lower sample index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::backbone::ExitOutputs;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Threshold used for an exit that selected no calibration sample. Larger
/// than any probability, so nothing passes.
pub const UNREACHABLE_THRESHOLD: f64 = 1.0 + 1e-3;

/// Slack for `f_k * N` landing a hair below an integer.
const FLOOR_SLACK: f64 = 1e-9;

/// Fraction of samples assigned to each exit: `q^k / sum_j q^j`, k = 1..=K.
pub fn exit_fractions(q: f64, num_exits: usize) -> Result<Vec<f64>> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Domain(format!("budget q must be positive, got {q}")));
    }
    if num_exits == 0 {
        return Err(Error::Domain("need at least one exit".into()));
    }
    // Log domain keeps large q and K from overflowing.
    let lq = q.ln();
    let top = if lq >= 0.0 { lq * num_exits as f64 } else { lq };
    let raw: Vec<f64> = (1..=num_exits).map(|k| (lq * k as f64 - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Per-exit sample counts for a pool of `n` samples.
pub fn exit_sizes(q: f64, num_exits: usize, n: usize) -> Result<Vec<usize>> {
    let fractions = exit_fractions(q, num_exits)?;
    let mut sizes = Vec::with_capacity(num_exits);
    let mut used = 0usize;
    for f in &fractions[..num_exits - 1] {
        let s = ((f * n as f64 + FLOOR_SLACK).floor() as usize).min(n - used);
        used += s;
        sizes.push(s);
    }
    sizes.push(n - used);
    Ok(sizes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationResult {
    /// Sample indices per exit, in selection order.
    pub subsets: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
}

impl AllocationResult {
    /// Exit assigned to every sample.
    pub fn exit_of(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (k, subset) in self.subsets.iter().enumerate() {
            for &i in subset {
                out[i] = k;
            }
        }
        out
    }
}

fn rank(conf: &Matrix, k: usize, a: usize, b: usize) -> Ordering {
    conf.get(b, k)
        .partial_cmp(&conf.get(a, k))
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Greedy meta-data allocation: exit 1 takes its `N_1` most confident
/// samples, exit 2 its `N_2` most confident among the rest, and so on; the
/// last exit takes everything left.
pub fn allocate_meta(confidences: &Matrix, q: f64) -> Result<AllocationResult> {
    let n = confidences.rows();
    let k_exits = confidences.cols();
    if n == 0 {
        return Err(Error::Domain("cannot allocate an empty meta set".into()));
    }
    if !confidences.is_finite() {
        return Err(Error::Numeric("non-finite confidence".into()));
    }
    let sizes = exit_sizes(q, k_exits, n)?;
    let mut pool: Vec<usize> = (0..n).collect();
    let mut subsets = Vec::with_capacity(k_exits);
    for (k, &size) in sizes.iter().enumerate() {
        if k + 1 == k_exits {
            pool.sort_unstable_by(|&a, &b| rank(confidences, k, a, b));
            subsets.push(std::mem::take(&mut pool));
            break;
        }
        pool.sort_unstable_by(|&a, &b| rank(confidences, k, a, b));
        let rest = pool.split_off(size);
        subsets.push(std::mem::replace(&mut pool, rest));
    }
    Ok(AllocationResult { subsets, sizes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub eps: Vec<f64>,
}

impl ThresholdVector {
    pub fn new(eps: Vec<f64>) -> Result<Self> {
        if eps.is_empty() {
            return Err(Error::Domain("empty threshold vector".into()));
        }
        if *eps.last().unwrap() != 0.0 {
            return Err(Error::Domain("the last exit threshold must be 0".into()));
        }
        if eps.iter().any(|e| !(0.0..=UNREACHABLE_THRESHOLD).contains(e)) {
            return Err(Error::Domain(format!("thresholds out of range: {eps:?}")));
        }
        Ok(Self { eps })
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }
}

/// Thresholds that replay the allocation of `val_confidences` under `q`:
/// each exit's threshold is the confidence of the least confident sample it
/// selected.
pub fn calibrate_thresholds(val_confidences: &Matrix, q: f64) -> Result<ThresholdVector> {
    Ok(calibrate_with_allocation(val_confidences, q)?.0)
}

pub fn calibrate_with_allocation(val_confidences: &Matrix, q: f64) -> Result<(ThresholdVector, AllocationResult)> {
    let alloc = allocate_meta(val_confidences, q)?;
    let k_exits = val_confidences.cols();
    let mut eps = Vec::with_capacity(k_exits);
    for (k, subset) in alloc.subsets.iter().enumerate() {
        if k + 1 == k_exits {
            eps.push(0.0);
        } else {
            eps.push(match subset.last() {
                Some(&i) => val_confidences.get(i, k),
                None => UNREACHABLE_THRESHOLD,
            });
        }
    }
    Ok((ThresholdVector { eps }, alloc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exit: usize,
    pub prediction: usize,
    pub correct: bool,
}

/// First exit whose confidence reaches its threshold; the last exit accepts
/// everything.
pub fn exit_index(confidences: &[f64], thresholds: &ThresholdVector) -> usize {
    let last = confidences.len() - 1;
    (0..last)
        .find(|&k| confidences[k] >= thresholds.eps[k])
        .unwrap_or(last)
}

pub fn dynamic_infer(outputs: &ExitOutputs, thresholds: &ThresholdVector) -> Result<Vec<ExitDecision>> {
    if thresholds.len() != outputs.num_exits() {
        return Err(Error::Shape(format!(
            "{} thresholds for {} exits",
            thresholds.len(),
            outputs.num_exits()
        )));
    }
    Ok((0..outputs.batch_size())
        .map(|i| {
            let exit = exit_index(outputs.confidences.row(i), thresholds);
            let prediction = outputs.prediction(i, exit);
            ExitDecision {
                exit,
                prediction,
                correct: prediction == outputs.label(i),
            }
        })
        .collect())
}

/// Number of samples leaving at each exit.
pub fn exit_counts(decisions: &[ExitDecision], num_exits: usize) -> Vec<usize> {
    let mut counts = vec![0; num_exits];
    for d in decisions {
        counts[d.exit] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub costs: Vec<f64>,
}

impl CostModel {
    pub fn new(costs: Vec<f64>) -> Result<Self> {
        if costs.is_empty() || costs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "exit costs must be strictly increasing, got {costs:?}"
            )));
        }
        Ok(Self { costs })
    }

    pub fn from_mul_adds(counts: &[u64]) -> Result<Self> {
        Self::new(counts.iter().map(|&c| c as f64).collect())
    }
}

/// `sum_k (count_k / N) c_k`.
pub fn expected_cost(counts: &[usize], model: &CostModel) -> Result<f64> {
    if counts.len() != model.costs.len() {
        return Err(Error::Shape(format!(
            "{} exit counts for {} costs",
            counts.len(),
            model.costs.len()
        )));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Domain("no samples were evaluated".into()));
    }
    Ok(counts
        .iter()
        .zip(&model.costs)
        .map(|(&c, &cost)| c as f64 / n as f64 * cost)
        .sum())
}

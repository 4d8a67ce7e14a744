//! Evaluation metrics document and its CSV companions.
//!
//! `metrics.json` (schema version 1):
//!
//! ```text
//! { "schema_version": 1, "run_id", "config_hash", "resolved_config",
//!   "anytime": [ { "exit", "accuracy", "mul_adds" } ],
//!   "sweep":   [ { "q", "thresholds", "exit_counts", "accuracy", "expected_mul_adds" } ],
//!   "scatter": [ { "epoch", "iteration", "exit", "loss", "weight", "selected_by_exit1" } ] }
//! ```
//!
//! `exit` is 1-based in `anytime` and in the CSV files; `scatter[].exit` keeps
//! the 0-based index used by the library. CSV column orders:
//!
//! - `anytime.csv`: `exit,accuracy,mul_adds`
//! - `sweep.csv`: `q,accuracy,expected_mul_adds,count_1..count_K,threshold_1..threshold_K`
//! - `scatter.csv`: `epoch,iteration,exit,loss,weight,selected_by_exit1`

use std::fmt::Write as _;

use anyhow::bail;
use serde::{Deserialize, Serialize};

use exitweave::trainer::ScatterPoint;

use crate::config::ResolvedConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnytimeRow {
    pub exit: usize,
    pub accuracy: f64,
    pub mul_adds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub q: f64,
    pub thresholds: Vec<f64>,
    pub exit_counts: Vec<usize>,
    pub accuracy: f64,
    pub expected_mul_adds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub resolved_config: ResolvedConfig,
    pub anytime: Vec<AnytimeRow>,
    pub sweep: Vec<SweepRow>,
    pub scatter: Vec<ScatterPoint>,
}

impl MetricsRecord {
    pub fn check_finite(&self) -> anyhow::Result<()> {
        let anytime = self.anytime.iter().all(|r| r.accuracy.is_finite());
        let sweep = self.sweep.iter().all(|r| {
            r.q.is_finite()
                && r.accuracy.is_finite()
                && r.expected_mul_adds.is_finite()
                && r.thresholds.iter().all(|t| t.is_finite())
        });
        let scatter = self.scatter.iter().all(|p| p.loss.is_finite() && p.weight.is_finite());
        if !(anytime && sweep && scatter) {
            bail!(CliError::Numeric("metrics contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        self.check_finite()?;
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses a metrics document, rejecting schema versions this build does
    /// not know.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => bail!(CliError::Compatibility(format!(
                "metrics schema version {v} is not supported (expected {SCHEMA_VERSION})"
            ))),
            None => bail!(CliError::Compatibility("metrics document has no schema_version".into())),
        }
        let rec: MetricsRecord = serde_json::from_value(raw)?;
        rec.check_finite()?;
        Ok(rec)
    }

    pub fn anytime_csv(&self) -> String {
        let mut out = String::from("exit,accuracy,mul_adds\n");
        for r in &self.anytime {
            let _ = writeln!(out, "{},{},{}", r.exit, r.accuracy, r.mul_adds);
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let k = self.anytime.len();
        let mut out = String::from("q,accuracy,expected_mul_adds");
        for i in 1..=k {
            let _ = write!(out, ",count_{i}");
        }
        for i in 1..=k {
            let _ = write!(out, ",threshold_{i}");
        }
        out.push('\n');
        for r in &self.sweep {
            let _ = write!(out, "{},{},{}", r.q, r.accuracy, r.expected_mul_adds);
            for c in &r.exit_counts {
                let _ = write!(out, ",{c}");
            }
            for t in &r.thresholds {
                let _ = write!(out, ",{t}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("epoch,iteration,exit,loss,weight,selected_by_exit1\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.epoch,
            p.iteration,
            p.exit + 1,
            p.loss,
            p.weight,
            p.selected_by_exit1
        );
    }
    out
}

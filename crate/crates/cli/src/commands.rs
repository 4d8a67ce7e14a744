use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use exitweave::backbone::{count_mul_adds, BackboneConfig};
use exitweave::checkpoint::Checkpoint;
use exitweave::exitpolicy::{calibrate_with_allocation, dynamic_infer, exit_counts, expected_cost, CostModel};
use exitweave::gradcheck::{run_all, GradcheckCase, Sabotage, SuiteReport};
use exitweave::numkit::Matrix;
use exitweave::trainer::{evaluate, run_training, History, TrainState};
use exitweave::wpn::WpnConfig;

use crate::config::{DatasetSource, ResolvedConfig, RunConfigFile};
use crate::metrics::{scatter_csv, AnytimeRow, MetricsRecord, SweepRow, SCHEMA_VERSION};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const HISTORY_FILE: &str = "history.json";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const ANYTIME_FILE: &str = "anytime.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// `0.05, 0.10, ..., 2.00`.
pub fn default_q_grid() -> Vec<f64> {
    (1..=40).map(|i| i as f64 * 0.05).collect()
}

/// Parses a comma-separated list of positive budgets.
pub fn parse_q_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            match s.parse::<f64>() {
                Ok(q) if q.is_finite() && q > 0.0 => Ok(q),
                _ => Err(CliError::Usage(format!("q-grid entry {s:?} is not a positive number"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        bail!(CliError::Usage("q-grid is empty".into()));
    }
    Ok(grid)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub resolved: ResolvedConfig,
    pub state: TrainState,
    pub history: History,
    pub warnings: Vec<String>,
}

pub fn cmd_train(config_path: &Path, overrides: &TrainOverrides) -> anyhow::Result<TrainOutcome> {
    let mut file = RunConfigFile::from_file(config_path)?;
    if let Some(seed) = overrides.seed {
        file.train.seed = seed;
    }
    if let Some(out) = &overrides.out {
        file.output.dir = out.clone();
    }
    if let Some(path) = &overrides.dataset {
        file.dataset = DatasetSource::from_file(path)?;
    }
    let splits = file.dataset.load()?;
    let resolved = file.resolve(&splits)?;
    let (state, history) = run_training(&resolved.train, &resolved.backbone, &resolved.wpn, &splits.train, &splits.val)?;

    let dir = file.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let metadata = serde_json::json!({
        "run_id": resolved.run_id(),
        "config_hash": resolved.hash(),
        "resolved_config": resolved,
    });
    Checkpoint::new(state.clone(), metadata).save(&dir.join(CHECKPOINT_FILE))?;
    write_file(
        &dir.join(RESOLVED_CONFIG_FILE),
        &(serde_json::to_string_pretty(&resolved)? + "\n"),
    )?;
    write_file(&dir.join(HISTORY_FILE), &(serde_json::to_string(&history)? + "\n"))?;
    write_file(&dir.join(SCATTER_FILE), &scatter_csv(&history.scatter))?;
    Ok(TrainOutcome {
        dir,
        resolved,
        state,
        history,
        warnings: splits.warnings,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub dataset: Option<PathBuf>,
    pub q_grid: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub dir: PathBuf,
    pub metrics: MetricsRecord,
}

fn check_compatible(backbone: &BackboneConfig, resolved: &ResolvedConfig, dim: usize, classes: usize) -> anyhow::Result<()> {
    if *backbone != resolved.backbone {
        bail!(CliError::Compatibility(
            "checkpoint parameters do not match its recorded backbone configuration".into()
        ));
    }
    if backbone.input_dim != dim || backbone.num_classes != classes {
        bail!(CliError::Compatibility(format!(
            "checkpoint expects {} features and {} classes, dataset has {dim} and {classes}",
            backbone.input_dim, backbone.num_classes
        )));
    }
    Ok(())
}

pub fn cmd_eval(checkpoint_path: &Path, opts: &EvalOptions) -> anyhow::Result<EvalOutcome> {
    if !checkpoint_path.is_file() {
        bail!(CliError::MissingFile(checkpoint_path.to_path_buf()));
    }
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let resolved: ResolvedConfig = serde_json::from_value(
        ckpt.metadata
            .get("resolved_config")
            .cloned()
            .ok_or_else(|| CliError::Compatibility("checkpoint carries no resolved configuration".into()))?,
    )
    .context("reading the checkpoint's resolved configuration")?;
    let source = match &opts.dataset {
        Some(path) => DatasetSource::from_file(path)?,
        None => resolved.dataset.clone(),
    };
    let splits = source.load()?;
    let backbone = ckpt.state.backbone.config().clone();
    check_compatible(&backbone, &resolved, splits.test.dim(), splits.test.num_classes)?;
    if splits.val.dim() != backbone.input_dim {
        bail!(CliError::Compatibility("validation split has the wrong feature width".into()));
    }

    let grid = opts.q_grid.clone().unwrap_or_else(default_q_grid);
    let mul_adds = count_mul_adds(&backbone);
    let costs = CostModel::from_mul_adds(&mul_adds)?;
    let val_out = evaluate(&ckpt.state.backbone, &splits.val)?;
    let test_out = evaluate(&ckpt.state.backbone, &splits.test)?;

    let anytime = test_out
        .exit_accuracies()
        .into_iter()
        .zip(&mul_adds)
        .enumerate()
        .map(|(k, (accuracy, &m))| AnytimeRow {
            exit: k + 1,
            accuracy,
            mul_adds: m,
        })
        .collect();
    // Grid points are independent; collect() keeps them in grid order.
    let sweep = grid
        .par_iter()
        .map(|&q| -> anyhow::Result<SweepRow> {
            let (thresholds, _) = calibrate_with_allocation(&val_out.confidences, q)?;
            let decisions = dynamic_infer(&test_out, &thresholds)?;
            let counts = exit_counts(&decisions, test_out.num_exits());
            let correct = decisions.iter().filter(|d| d.correct).count();
            Ok(SweepRow {
                q,
                thresholds: thresholds.eps.clone(),
                accuracy: correct as f64 / decisions.len() as f64,
                expected_mul_adds: expected_cost(&counts, &costs)?,
                exit_counts: counts,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let ckpt_dir = checkpoint_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let history_path = ckpt_dir.join(HISTORY_FILE);
    let scatter = if history_path.is_file() {
        let text = fs::read_to_string(&history_path).with_context(|| format!("reading {}", history_path.display()))?;
        let history: History =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", history_path.display()))?;
        history.scatter
    } else {
        Vec::new()
    };

    let metrics = MetricsRecord {
        schema_version: SCHEMA_VERSION,
        run_id: resolved.run_id(),
        config_hash: resolved.hash(),
        resolved_config: resolved,
        anytime,
        sweep,
        scatter,
    };
    let dir = opts.out.clone().unwrap_or(ckpt_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join(METRICS_FILE), &metrics.to_json()?)?;
    write_file(&dir.join(ANYTIME_FILE), &metrics.anytime_csv())?;
    write_file(&dir.join(SWEEP_FILE), &metrics.sweep_csv())?;
    Ok(EvalOutcome { dir, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    /// Samples in each of the train and meta halves.
    pub half_batch: usize,
    pub lr: f64,
    pub q: f64,
    pub seed: u64,
    /// Number of independent random cases.
    pub instances: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            half_batch: 4,
            lr: 0.1,
            q: 0.75,
            seed: 0,
            instances: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub wpn: crate::config::WpnSection,
    #[serde(default)]
    pub gradcheck: GradcheckSettings,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                input_dim: 4,
                trunk_widths: vec![6, 5, 4],
                num_classes: 3,
            },
            wpn: crate::config::WpnSection {
                hidden_width: 16,
                hidden_depth: 1,
                delta: 0.8,
            },
            gradcheck: GradcheckSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub suites: Vec<SuiteReport>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

pub fn cmd_gradcheck(config_path: Option<&Path>, seed: Option<u64>, sabotage: Sabotage) -> anyhow::Result<GradcheckOutcome> {
    let mut cfg = match config_path {
        Some(path) => {
            if !path.is_file() {
                bail!(CliError::MissingFile(path.to_path_buf()));
            }
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<GradcheckConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => GradcheckConfig::default(),
    };
    if let Some(s) = seed {
        cfg.gradcheck.seed = s;
    }
    cfg.backbone.validate()?;
    let wpn = WpnConfig {
        num_exits: cfg.backbone.num_exits(),
        hidden_width: cfg.wpn.hidden_width,
        hidden_depth: cfg.wpn.hidden_depth,
        delta: cfg.wpn.delta,
    };
    wpn.validate()?;
    let settings = &cfg.gradcheck;
    if settings.instances == 0 {
        bail!(CliError::Config("gradcheck.instances must be >= 1".into()));
    }
    let mut merged: Vec<SuiteReport> = Vec::new();
    for i in 0..settings.instances {
        let seed = settings.seed.wrapping_add(i as u64);
        let case = GradcheckCase::random(&cfg.backbone, &wpn, settings.half_batch, settings.lr, settings.q, seed)?;
        for report in run_all(&case, seed, sabotage)? {
            match merged.iter_mut().find(|r| r.name == report.name) {
                Some(m) => {
                    m.max_rel_err = m.max_rel_err.max(report.max_rel_err);
                    m.checks += report.checks;
                }
                None => merged.push(report),
            }
        }
    }
    Ok(GradcheckOutcome { suites: merged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocateOutcome {
    pub q: f64,
    pub sizes: Vec<usize>,
    pub subsets: Vec<Vec<usize>>,
    pub thresholds: Vec<f64>,
}

/// Parses an N x K table of confidences. Blank lines and lines starting
/// with `#` are skipped; an optional first line whose fields are not all
/// numbers is treated as a header.
pub fn parse_confidence_csv(text: &str) -> anyhow::Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut seen_line = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let first = !seen_line;
        seen_line = true;
        let row = match parsed {
            Ok(r) => r,
            Err(_) if first && fields.iter().all(|f| f.parse::<f64>().is_err()) => continue,
            Err(_) => bail!(CliError::Format(format!("line {lineno}: expected comma-separated numbers"))),
        };
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(CliError::Format(format!("line {lineno}: confidence {v} is outside [0, 1]")));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                bail!(CliError::Format(format!("line {lineno}: expected {w} columns, found {}", row.len())))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!(CliError::Format("no confidence rows found".into()));
    }
    Ok(Matrix::from_rows(&rows)?)
}

pub fn cmd_allocate(csv_path: &Path, q: f64, num_exits: Option<usize>) -> anyhow::Result<AllocateOutcome> {
    if !csv_path.is_file() {
        bail!(CliError::MissingFile(csv_path.to_path_buf()));
    }
    let text = fs::read_to_string(csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let table = parse_confidence_csv(&text).map_err(|e| match e.downcast::<CliError>() {
        Ok(CliError::Format(msg)) => CliError::Format(format!("{}: {msg}", csv_path.display())).into(),
        Ok(other) => other.into(),
        Err(e) => e,
    })?;
    if let Some(k) = num_exits {
        if k != table.cols() {
            bail!(CliError::Usage(format!(
                "--exits {k} does not match the {} columns in {}",
                table.cols(),
                csv_path.display()
            )));
        }
    }
    let (thresholds, alloc) = calibrate_with_allocation(&table, q)?;
    Ok(AllocateOutcome {
        q,
        sizes: alloc.sizes,
        subsets: alloc.subsets,
        thresholds: thresholds.eps,
    })
}

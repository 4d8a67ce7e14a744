//! Run configuration files.
//!
//! A run is described by one TOML document with the tables `[train]`,
//! `[backbone]`, `[wpn]`, `[dataset]` and `[output]`. Unknown keys are
//! rejected everywhere. Missing keys take their defaults, and the fully
//! materialized copy ([`ResolvedConfig`]) is what gets written next to every
//! artifact and hashed into the run id.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use exitweave::backbone::BackboneConfig;
use exitweave::datahub::{
    gen_synthetic_gaussians, load_cifar_bin, load_idx, longtail_subsample, read_container, CifarKind, Dataset, Split,
};
use exitweave::numkit::RngStream;
use exitweave::trainer::TrainConfig;
use exitweave::wpn::WpnConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub wpn: WpnSection,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub output: OutputSection,
}

/// Input width and class count default to whatever the dataset provides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub trunk_widths: Vec<usize>,
    pub input_dim: Option<usize>,
    pub num_classes: Option<usize>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            trunk_widths: vec![32, 32, 32, 32],
            input_dim: None,
            num_classes: None,
        }
    }
}

/// The exit count is taken from the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WpnSection {
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub delta: f64,
}

impl Default for WpnSection {
    fn default() -> Self {
        Self {
            hidden_width: 500,
            hidden_depth: 1,
            delta: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_spread() -> f64 {
    1.0
}

/// Where the train/val/test splits come from. Relative paths are resolved
/// against the directory of the config file. `longtail_factor` subsamples
/// the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        val_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        longtail_factor: Option<f64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        longtail_factor: Option<f64>,
    },
    Cifar {
        kind: CifarKind,
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        longtail_factor: Option<f64>,
    },
    Container {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        longtail_factor: Option<f64>,
    },
}

/// Train/val/test splits ready for use.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

impl DatasetSource {
    /// Reads a standalone file holding only a `[dataset]` table.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wrapper {
            dataset: DatasetSource,
        }
        let text = read_config_text(path)?;
        let mut w: Wrapper =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        w.dataset.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(w.dataset)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Synthetic { .. } => {}
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                fix(test_images);
                fix(test_labels);
            }
            DatasetSource::Cifar {
                train_files, test_file, ..
            } => {
                train_files.iter_mut().for_each(fix);
                fix(test_file);
            }
            DatasetSource::Container { train, val, test, .. } => {
                fix(train);
                fix(val);
                fix(test);
            }
        }
    }

    fn seed(&self) -> u64 {
        match self {
            DatasetSource::Synthetic { seed, .. }
            | DatasetSource::Idx { seed, .. }
            | DatasetSource::Cifar { seed, .. }
            | DatasetSource::Container { seed, .. } => *seed,
        }
    }

    fn longtail_factor(&self) -> Option<f64> {
        match self {
            DatasetSource::Synthetic { longtail_factor, .. }
            | DatasetSource::Idx { longtail_factor, .. }
            | DatasetSource::Cifar { longtail_factor, .. }
            | DatasetSource::Container { longtail_factor, .. } => *longtail_factor,
        }
    }

    pub fn load(&self) -> anyhow::Result<Splits> {
        let seed = self.seed();
        let (train, val, test) = match self {
            DatasetSource::Synthetic {
                classes,
                dim,
                train_per_class,
                val_per_class,
                test_per_class,
                spread,
                ..
            } => {
                let gen = |n: usize, split: Split| {
                    let mut rng = RngStream::child(seed, &format!("data/{}", split.name()));
                    gen_synthetic_gaussians(*classes, *dim, n, *spread, split, &mut rng)
                };
                (
                    gen(*train_per_class, Split::Train)?,
                    gen(*val_per_class, Split::Val)?,
                    gen(*test_per_class, Split::Test)?,
                )
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                val_fraction,
                ..
            } => {
                let full = load_idx(train_images, train_labels, Split::Train)?;
                let (train, val) = carve_val(&full, *val_fraction, seed)?;
                (train, val, load_idx(test_images, test_labels, Split::Test)?)
            }
            DatasetSource::Cifar {
                kind,
                train_files,
                test_file,
                val_fraction,
                ..
            } => {
                if train_files.is_empty() {
                    bail!(CliError::Config("cifar source needs at least one training file".into()));
                }
                let parts = train_files
                    .iter()
                    .map(|p| load_cifar_bin(p, *kind, Split::Train))
                    .collect::<Result<Vec<_>, _>>()?;
                let full = concat(&parts)?;
                let (train, val) = carve_val(&full, *val_fraction, seed)?;
                (train, val, load_cifar_bin(test_file, *kind, Split::Test)?)
            }
            DatasetSource::Container { train, val, test, .. } => {
                let mut tr = read_container(train)?;
                let mut va = read_container(val)?;
                let mut te = read_container(test)?;
                tr.split = Split::Train;
                va.split = Split::Val;
                te.split = Split::Test;
                (tr, va, te)
            }
        };
        let mut warnings = Vec::new();
        let train = match self.longtail_factor() {
            Some(f) => {
                let mut rng = RngStream::child(seed, "data/longtail");
                let outcome = longtail_subsample(&train, f, &mut rng)?;
                warnings = outcome.warnings;
                outcome.dataset
            }
            None => train,
        };
        if train.num_classes != test.num_classes || val.num_classes != test.num_classes {
            bail!(CliError::Config("splits disagree on the number of classes".into()));
        }
        Ok(Splits {
            train,
            val,
            test,
            warnings,
        })
    }
}

fn concat(parts: &[Dataset]) -> anyhow::Result<Dataset> {
    let dim = parts[0].dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.dim() != dim {
            bail!(CliError::Config("training files have different feature widths".into()));
        }
        data.extend_from_slice(p.features.data());
        labels.extend_from_slice(&p.labels);
    }
    let features = exitweave::numkit::Matrix::from_vec(labels.len(), dim, data)?;
    Ok(Dataset::new(features, labels, parts[0].num_classes, Split::Train)?)
}

/// Moves a seeded random `fraction` of `full` into a validation split.
fn carve_val(full: &Dataset, fraction: f64, seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(CliError::Config(format!("val_fraction must lie in (0, 1), got {fraction}")));
    }
    let n = full.len();
    let n_val = ((n as f64) * fraction).round() as usize;
    if n_val == 0 || n_val == n {
        bail!(CliError::Config(format!(
            "val_fraction {fraction} leaves an empty split out of {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::child(seed, "data/val-split").shuffle(&mut order);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let mut train = full.subset(&train_idx)?;
    let mut val = full.subset(&val_idx)?;
    train.split = Split::Train;
    val.split = Split::Val;
    Ok((train, val))
}

/// Everything that determines a run's results, with every default filled
/// in. The output location is deliberately left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub wpn: WpnConfig,
    pub dataset: DatasetSource,
}

impl ResolvedConfig {
    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.train.seed)
    }
}

fn read_config_text(path: &Path) -> anyhow::Result<String> {
    if !path.is_file() {
        bail!(CliError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

impl RunConfigFile {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = read_config_text(path)?;
        let mut cfg: RunConfigFile = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset.rebase(base);
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    /// Fills in the data-dependent backbone fields and checks them.
    pub fn resolve(&self, splits: &Splits) -> anyhow::Result<ResolvedConfig> {
        let dim = splits.train.dim();
        let classes = splits.train.num_classes;
        if let Some(d) = self.backbone.input_dim {
            if d != dim {
                bail!(CliError::Config(format!("backbone.input_dim is {d} but the data has {dim} features")));
            }
        }
        if let Some(c) = self.backbone.num_classes {
            if c != classes {
                bail!(CliError::Config(format!("backbone.num_classes is {c} but the data has {classes} classes")));
            }
        }
        let backbone = BackboneConfig::new(dim, self.backbone.trunk_widths.clone(), classes)?;
        let wpn = WpnConfig {
            num_exits: backbone.num_exits(),
            hidden_width: self.wpn.hidden_width,
            hidden_depth: self.wpn.hidden_depth,
            delta: self.wpn.delta,
        };
        wpn.validate()?;
        self.train.validate()?;
        Ok(ResolvedConfig {
            train: self.train.clone(),
            backbone,
            wpn,
            dataset: self.dataset.clone(),
        })
    }
}

//! Datasets: synthetic Gaussian classes, IDX and CIFAR binary readers, a
//! small versioned container, long-tailed subsampling and batching.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{derive_seed, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Domain("dataset is empty".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index(format!("label {y} with {num_classes} classes")));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("dataset has non-finite features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows and labels at the given indices.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (features, labels) = self.gather(indices);
        Self::new(features, labels, self.num_classes, self.split)
    }
}

/// Class means are the scaled simplex vertices `e_c` when `dim >= classes`,
/// otherwise points on the unit circle in the first two coordinates. Each
/// sample adds isotropic noise of standard deviation `spread`.
pub fn gen_synthetic_gaussians(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    split: Split,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if num_classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs >= 2 classes, dim >= 1 and a positive class size".into(),
        ));
    }
    if dim < 2 && num_classes > 2 {
        return Err(Error::Config("more than two classes need dim >= 2".into()));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim >= num_classes {
                m[c] = 1.0;
            } else if dim == 1 {
                m[0] = if c == 0 { -1.0 } else { 1.0 };
            } else {
                let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
                m[0] = angle.cos();
                m[1] = angle.sin();
            }
            m
        })
        .collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for &mu in mean {
                data.push(mu + spread * rng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes, split)
}

fn format_err(what: &'static str, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        what,
        offset,
        reason: reason.into(),
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(what, at as u64, "truncated header"))
}

/// Parses an IDX file of unsigned bytes; returns dims and the payload.
fn parse_idx<'a>(bytes: &'a [u8], what: &'static str) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(format_err(what, 0, "missing magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(what, 0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(what, 2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format_err(what, 3, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_be_u32(bytes, 4 + 4 * d, what)? as usize);
    }
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(format_err(
            what,
            bytes.len() as u64,
            format!("expected {expected} data bytes after header, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(format_err(
            what,
            (header + expected) as u64,
            "trailing bytes after data",
        ));
    }
    Ok((dims, payload))
}

/// MNIST-style IDX pair: an image file (magic `0x00000803` or any ubyte
/// tensor with the sample count first) and a label file (`0x00000801`).
/// Pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (idims, pixels) = parse_idx(&img_bytes, "IDX image file")?;
    let (ldims, raw_labels) = parse_idx(&lbl_bytes, "IDX label file")?;
    if ldims.len() != 1 {
        return Err(format_err("IDX label file", 3, "labels must be one-dimensional"));
    }
    if idims[0] != ldims[0] {
        return Err(format_err(
            "IDX label file",
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let n = idims[0];
    let dim: usize = idims[1..].iter().product::<usize>().max(1);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    /// One label byte per record, 10 classes.
    Cifar10,
    /// Coarse and fine label bytes; the fine label (100 classes) is used.
    Cifar100,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// A CIFAR binary batch: fixed-size records of label byte(s) followed by
/// 3072 channel-major pixel bytes, scaled to [0, 1].
pub fn load_cifar_bin(path: &Path, kind: CifarKind, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (label_bytes, num_classes) = match kind {
        CifarKind::Cifar10 => (1, 10),
        CifarKind::Cifar100 => (2, 100),
    };
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(format_err("CIFAR batch", 0, "empty file"));
    }
    if bytes.len() % record != 0 {
        let whole = bytes.len() / record;
        return Err(format_err(
            "CIFAR batch",
            (whole * record) as u64,
            format!("truncated record ({} of {record} bytes)", bytes.len() % record),
        ));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, chunk) in bytes.chunks_exact(record).enumerate() {
        let y = chunk[label_bytes - 1] as usize;
        if y >= num_classes {
            return Err(format_err(
                "CIFAR batch",
                (r * record + label_bytes - 1) as u64,
                format!("label {y} out of range"),
            ));
        }
        labels.push(y);
        data.extend(chunk[label_bytes..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new(Matrix::from_vec(n, CIFAR_PIXELS, data)?, labels, num_classes, split)
}

/// Magic bytes of the dataset container.
pub const CONTAINER_MAGIC: &[u8; 4] = b"EWDS";
pub const CONTAINER_VERSION: u32 = 1;

/// Little-endian container:
///
/// ```text
/// "EWDS" | version u32 | split u8 | rows u64 | cols u64 | classes u32
///        | rows*cols f64 features | rows u32 labels
/// ```
pub fn write_container(dataset: &Dataset, path: &Path) -> Result<()> {
    let n = dataset.len();
    let d = dataset.dim();
    let mut out = Vec::with_capacity(29 + n * d * 8 + n * 4);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.push(dataset.split.code());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    for v in dataset.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &dataset.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = "dataset container";
    let take = |at: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + len)
            .ok_or_else(|| format_err(what, bytes.len() as u64, "truncated"))
    };
    if take(0, 4)? != CONTAINER_MAGIC {
        return Err(format_err(what, 0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(format_err(what, 4, format!("unsupported version {version}")));
    }
    let split = Split::from_code(take(8, 1)?[0]).ok_or_else(|| format_err(what, 8, "bad split tag"))?;
    let n = u64::from_le_bytes(take(9, 8)?.try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(take(17, 8)?.try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(take(25, 4)?.try_into().unwrap()) as usize;
    let mut at = 29;
    let feature_bytes = take(at, n * d * 8)?;
    let features: Vec<f64> = feature_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    at += n * d * 8;
    let label_bytes = take(at, n * 4)?;
    let labels = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    at += n * 4;
    if at != bytes.len() {
        return Err(format_err(what, at as u64, "trailing bytes"));
    }
    Dataset::new(Matrix::from_vec(n, d, features)?, labels, classes, split)
}

/// `mu = F^(-1/(C-1))`.
pub fn longtail_mu(imbalance: f64, num_classes: usize) -> Result<f64> {
    if !(imbalance >= 1.0) {
        return Err(Error::Config(format!("imbalance factor must be >= 1, got {imbalance}")));
    }
    if num_classes < 2 {
        return Ok(1.0);
    }
    Ok(imbalance.powf(-1.0 / (num_classes - 1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTailOutcome {
    pub dataset: Dataset,
    pub kept: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Keeps `round(N_c * mu^c)` samples of class `c`, drawn without replacement.
/// A class that would round to zero keeps one sample and is reported.
pub fn longtail_subsample(dataset: &Dataset, imbalance: f64, rng: &mut RngStream) -> Result<LongTailOutcome> {
    let mu = longtail_mu(imbalance, dataset.num_classes)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    let mut kept = Vec::with_capacity(dataset.num_classes);
    let mut warnings = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Domain(format!("class {c} has no samples")));
        }
        let target = (members.len() as f64 * mu.powi(c as i32)).round() as usize;
        let target = if target == 0 {
            warnings.push(format!("class {c} rounded to zero samples; keeping one"));
            1
        } else {
            target.min(members.len())
        };
        rng.shuffle(members);
        let mut chosen = members[..target].to_vec();
        chosen.sort_unstable();
        keep.extend(chosen);
        kept.push(target);
    }
    keep.sort_unstable();
    Ok(LongTailOutcome {
        dataset: dataset.subset(&keep)?,
        kept,
        warnings,
    })
}

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`. A trailing
/// partial batch is kept only when `keep_remainder` is set.
pub fn make_batches(n: usize, batch_size: usize, epoch: u64, seed: u64, keep_remainder: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut rng = RngStream::new(derive_seed(seed, &format!("shuffle/{epoch}")));
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if !keep_remainder && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = gen_synthetic_gaussians(4, 6, 10, 0.3, Split::Train, &mut RngStream::new(1)).unwrap();
        let b = gen_synthetic_gaussians(4, 6, 10, 0.3, Split::Train, &mut RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10; 4]);
    }

    #[test]
    fn zero_spread_gives_point_classes() {
        let d = gen_synthetic_gaussians(3, 2, 5, 0.0, Split::Train, &mut RngStream::new(1)).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                let same = d.features.row(i) == d.features.row(j);
                assert_eq!(same, d.labels[i] == d.labels[j]);
            }
        }
    }

    fn idx_bytes(magic: [u8; 4], dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_bytes([0, 0, 8, 3], &[2, 2, 2], &[0, 255, 51, 102, 255, 0, 0, 153])).unwrap();
        fs::write(&lbl, idx_bytes([0, 0, 8, 1], &[2], &[3, 7])).unwrap();
        let d = load_idx(&img, &lbl, Split::Test).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.features.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.features.row(1), &[1.0, 0.0, 0.0, 0.6]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_bytes([0, 0, 8, 3], &[2, 2, 2], &[1, 2, 3])).unwrap();
        fs::write(&lbl, idx_bytes([0, 0, 8, 1], &[2], &[0, 1])).unwrap();
        match load_idx(&img, &lbl, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::write(&img, idx_bytes([1, 0, 8, 3], &[1, 1, 1], &[1])).unwrap();
        assert!(matches!(
            load_idx(&img, &lbl, Split::Train),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for (label, fill) in [(4u8, 0u8), (9, 255)] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        }
        fs::write(&path, &bytes).unwrap();
        let d = load_cifar_bin(&path, CifarKind::Cifar10, Split::Train).unwrap();
        assert_eq!(d.labels, vec![4, 9]);
        assert_eq!(d.dim(), CIFAR_PIXELS);
        assert!(d.features.row(1).iter().all(|&v| v == 1.0));

        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_cifar_bin(&path, CifarKind::Cifar10, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn container_round_trip() {
        let d = gen_synthetic_gaussians(3, 4, 7, 0.9, Split::Val, &mut RngStream::new(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ewds");
        write_container(&d, &path).unwrap();
        assert_eq!(read_container(&path).unwrap(), d);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn mu_closed_form() {
        let mu = longtail_mu(100.0, 100).unwrap();
        assert!((mu - 0.954_548_456_661_834).abs() < 1e-12);
        assert_eq!(longtail_mu(1.0, 10).unwrap(), 1.0);
        assert!(longtail_mu(0.5, 10).is_err());
    }

    #[test]
    fn longtail_identity_and_shape() {
        let d = gen_synthetic_gaussians(5, 5, 40, 1.0, Split::Train, &mut RngStream::new(2)).unwrap();
        let same = longtail_subsample(&d, 1.0, &mut RngStream::new(3)).unwrap();
        assert_eq!(same.dataset, d);
        let lt = longtail_subsample(&d, 10.0, &mut RngStream::new(3)).unwrap();
        let counts = lt.dataset.class_counts();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(counts[0], 40);
        assert_eq!(counts[4], 4);
    }

    #[test]
    fn longtail_keeps_one_of_an_emptied_class() {
        let d = gen_synthetic_gaussians(3, 3, 2, 1.0, Split::Train, &mut RngStream::new(2)).unwrap();
        let lt = longtail_subsample(&d, 100.0, &mut RngStream::new(3)).unwrap();
        // mu = 0.1: classes 1 and 2 would round to zero.
        assert_eq!(lt.dataset.class_counts(), vec![2, 1, 1]);
        assert_eq!(lt.warnings.len(), 2);
    }

    #[test]
    fn batching() {
        let a = make_batches(10, 4, 0, 7, false).unwrap();
        let b = make_batches(10, 4, 0, 7, false).unwrap();
        let c = make_batches(10, 4, 1, 7, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 2);
        let flat: Vec<usize> = a.concat();
        let mut sorted = flat.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), flat.len());
        assert!(flat.iter().all(|&i| i < 10));
        let eval = make_batches(10, 4, 0, 7, true).unwrap();
        assert_eq!(eval.concat().len(), 10);
        assert!(make_batches(3, 4, 0, 7, true).is_err());
    }
}

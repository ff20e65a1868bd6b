//! Datasets: IDX and CIFAR-10 binary ingestion, synthetic Gaussian tasks and
//! IID / label-skewed partitioning across devices.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    pub dim: usize,
    pub classes: usize,
    /// Per-sample shape, e.g. `[28, 28]` or `[3, 32, 32]`.
    pub shape: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f32>,
        labels: Vec<u8>,
        shape: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let dim: usize = shape.iter().product();
        if features.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Config(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            dim,
            classes,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            name: self.name.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
            shape: self.shape.clone(),
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                msg: format!(
                    "{}: truncated, needed {} bytes at offset {}",
                    self.what, n, self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let mut c = Cursor { bytes, pos: 0, what: "IDX images" };
    let magic = c.u32_be()?;
    if magic != IDX_IMAGES {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("IDX images: bad magic {magic:#010x}"),
        });
    }
    let n = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let pixels = c.take(n * rows * cols)?;
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            offset: c.pos as u64,
            msg: format!("IDX images: {} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok((vec![n, rows, cols], pixels))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut c = Cursor { bytes, pos: 0, what: "IDX labels" };
    let magic = c.u32_be()?;
    if magic != IDX_LABELS {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("IDX labels: bad magic {magic:#010x}"),
        });
    }
    let n = c.u32_be()? as usize;
    let labels = c.take(n)?;
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            offset: c.pos as u64,
            msg: format!("IDX labels: {} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok(labels)
}

/// Parse in-memory IDX image and label files. Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset> {
    let (dims, pixels) = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if lab.len() != dims[0] {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{} images but {} labels", dims[0], lab.len()),
        });
    }
    if let Some(pos) = lab.iter().position(|&l| l as usize >= classes) {
        return Err(Error::Parse {
            offset: 8 + pos as u64,
            msg: format!("label {} outside 0..{classes}", lab[pos]),
        });
    }
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new("idx", features, lab.to_vec(), dims[1..].to_vec(), classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| {
            Error::MissingData(format!("cannot read {}: {e}", p.display()))
        })
    };
    let mut ds = parse_idx(&read(images_path)?, &read(labels_path)?, 10)?;
    ds.name = images_path
        .file_name()
        .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Ok(ds)
}

/// Encode as IDX image and label bytes; features are mapped back to bytes by
/// `round(x·255)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "IDX images need a 2-D sample shape, got {:?}",
            ds.shape
        )));
    }
    let mut img = Vec::with_capacity(16 + ds.features.len());
    for v in [IDX_IMAGES, ds.len() as u32, ds.shape[0] as u32, ds.shape[1] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.features.iter().map(|&x| to_byte(x)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse CIFAR-10 binary records (1 label byte, 3072 channel-major pixels).
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            msg: format!(
                "CIFAR-10: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * 3072);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("CIFAR-10: label byte {} > 9", rec[0]),
            });
        }
        labels.push(rec[0]);
        features.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new("cifar10", features, labels, vec![3, 32, 32], 10)
}

pub fn load_cifar10_bin(paths: &[&Path]) -> Result<Dataset> {
    let mut all: Option<Dataset> = None;
    for p in paths {
        let bytes = fs::read(p)
            .map_err(|e| Error::MissingData(format!("cannot read {}: {e}", p.display())))?;
        let ds = parse_cifar10_bin(&bytes)?;
        match all.as_mut() {
            None => all = Some(ds),
            Some(acc) => {
                acc.features.extend_from_slice(&ds.features);
                acc.labels.extend_from_slice(&ds.labels);
            }
        }
    }
    all.ok_or_else(|| Error::MissingData("no CIFAR-10 batch files given".into()))
}

pub fn encode_cifar10_bin(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.dim != 3072 {
        return Err(Error::Shape(format!("CIFAR-10 records need 3072 values, got {}", ds.dim)));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend(ds.row(i).iter().map(|&x| to_byte(x)));
    }
    Ok(out)
}

/// Gaussian class clusters with unit noise. Class means sit on scaled
/// orthogonal axes (random directions when `dim < classes`) so that the
/// distance between any two means is `separation`.
pub fn synth_classification(
    seed: u64,
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
) -> Result<Dataset> {
    if !(2..=256).contains(&classes) {
        return Err(Error::Config(format!("classes must lie in 2..=256, got {classes}")));
    }
    if dim == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dim >= classes {
                let mut m = vec![0.0; dim];
                m[c] = radius;
                m
            } else {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &l in &labels {
        for &m in &means[l as usize] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((m + z) as f32);
        }
    }
    Dataset::new(format!("synth-{classes}x{dim}"), features, labels, vec![dim], classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum PartitionMode {
    #[default]
    Iid,
    NonIid { labels_per_device: usize },
}


#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

impl Partition {
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(Vec::len).collect()
    }
}

/// Split `dataset` across `k` devices with `shard_size` samples each
/// (`n / k` when `None`). Label-skewed shards draw their label set uniformly
/// without replacement and split the shard as evenly as possible over it.
pub fn partition(
    dataset: &Dataset,
    k: usize,
    mode: PartitionMode,
    shard_size: Option<usize>,
    rng: &mut SimRng,
) -> Result<Partition> {
    let n = dataset.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot split {n} samples across {k} devices")));
    }
    let size = shard_size.unwrap_or(n / k);
    if size == 0 || size * k > n {
        return Err(Error::Infeasible(format!(
            "{k} shards of {size} samples need more than the {n} available"
        )));
    }
    let assignment = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks_exact(size).take(k).map(|c| c.to_vec()).collect()
        }
        PartitionMode::NonIid { labels_per_device: m } => {
            if m == 0 || m > dataset.classes {
                return Err(Error::Config(format!(
                    "labels per device must lie in 1..={}, got {m}",
                    dataset.classes
                )));
            }
            if size < m {
                return Err(Error::Infeasible(format!(
                    "a shard of {size} samples cannot cover {m} labels"
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
            for (i, &l) in dataset.labels.iter().enumerate() {
                pools[l as usize].push(i);
            }
            for p in pools.iter_mut() {
                p.shuffle(rng);
            }
            let all_labels: Vec<usize> = (0..dataset.classes).collect();
            let mut shards = Vec::with_capacity(k);
            for dev in 0..k {
                let mut chosen: Vec<usize> =
                    all_labels.choose_multiple(rng, m).copied().collect();
                chosen.sort_unstable();
                let mut shard = Vec::with_capacity(size);
                for (j, &l) in chosen.iter().enumerate() {
                    let want = size / m + usize::from(j < size % m);
                    let pool = &mut pools[l];
                    if pool.len() < want {
                        return Err(Error::Infeasible(format!(
                            "device {dev} needs {want} samples of label {l}, only {} left",
                            pool.len()
                        )));
                    }
                    shard.extend(pool.drain(pool.len() - want..));
                }
                shard.shuffle(rng);
                shards.push(shard);
            }
            shards
        }
    };
    Ok(Partition { assignment, mode })
}

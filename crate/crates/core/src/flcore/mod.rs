//! Federated learning engine: local minibatch SGD, weighted aggregation,
//! evaluation and reconstruction of the global model from combined symbols.

mod model;
pub mod round;

pub use model::{ArchKind, ModelArch};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modem::{demap, Constellation, QuantizerConfig};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    /// SGD step `λ`.
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// L2 regularisation coefficient added to the loss as `½·l2·‖θ‖²`.
    pub l2: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            learn_rate: 0.01,
            batch_size: 50,
            epochs: 1,
            l2: 0.0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::usage("train.learn_rate", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::usage("train.epochs", "must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::usage("train.l2", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub device: usize,
    /// `w_{k,t} − g_t`.
    pub update: Vec<f64>,
    pub weights: Vec<f64>,
    /// Minibatch size `|𝓝_{k,t}|`.
    pub sample_count: usize,
    /// Shard size `|𝓝_k|`.
    pub dataset_size: usize,
    /// Mean minibatch loss over the local steps.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Features of the selected rows as `f64`.
pub fn gather_rows(ds: &Dataset, rows: &[usize]) -> (Vec<f64>, Vec<u8>) {
    let mut x = Vec::with_capacity(rows.len() * ds.dim);
    for &r in rows {
        x.extend(ds.row(r).iter().map(|&v| v as f64));
    }
    (x, rows.iter().map(|&r| ds.labels[r]).collect())
}

/// Parameter blocks of a flat vector, in layout order.
pub fn unflatten(arch: &ModelArch, params: &[f64]) -> Result<Vec<Vec<f64>>> {
    if params.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "{} parameters for an architecture with {}",
            params.len(),
            arch.param_count()
        )));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for len in block_sizes(arch) {
        out.push(params[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

pub fn flatten(blocks: &[Vec<f64>]) -> Vec<f64> {
    blocks.concat()
}

fn block_sizes(arch: &ModelArch) -> Vec<usize> {
    let last = arch.last_layer();
    let (d, c) = (arch.input_dim(), arch.classes);
    let head = vec![last.len() - c, c];
    match arch.kind {
        ArchKind::LinearSoftmax => head,
        ArchKind::Mlp { hidden } => [vec![hidden * d, hidden], head].concat(),
        ArchKind::SmallCnn { filters, .. } => {
            let k = arch.kernel_coords().expect("CNN has kernels").len();
            [vec![k - filters, filters], head].concat()
        }
    }
}

/// One round of local work: `epochs` passes of minibatch SGD from `global`
/// over a reshuffled shard, `⌈n/batch⌉` steps per pass.
pub fn local_train(
    arch: &ModelArch,
    device: usize,
    global: &[f64],
    shard: &Dataset,
    cfg: &LocalTrainConfig,
    rng: &mut SimRng,
) -> Result<LocalUpdate> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::Config(format!("device {device} has an empty shard")));
    }
    let batch = cfg.batch_size.min(shard.len());
    let mut w = global.to_vec();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for rows in order.chunks(batch) {
            let (x, y) = gather_rows(shard, rows);
            let (loss, grad) = arch.loss_and_grad(&w, &x, &y, cfg.l2)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "device {device}: non-finite loss at local step {steps}"
                )));
            }
            for (p, g) in w.iter_mut().zip(&grad) {
                *p -= cfg.learn_rate * g;
            }
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        device,
        update: w.iter().zip(global).map(|(a, b)| a - b).collect(),
        weights: w,
        sample_count: batch,
        dataset_size: shard.len(),
        mean_loss: loss_sum / steps as f64,
        steps,
    })
}

/// `Σ_k (n_k / N) v_k`, accumulated in device order.
pub fn ideal_aggregate(vectors: &[&[f64]], sizes: &[f64]) -> Result<Vec<f64>> {
    if vectors.is_empty() || vectors.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} vectors with {} sizes",
            vectors.len(),
            sizes.len()
        )));
    }
    let total: f64 = sizes.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("aggregation sizes must sum to a positive value".into()));
    }
    let len = vectors[0].len();
    let mut out = vec![0.0; len];
    for (v, &s) in vectors.iter().zip(sizes) {
        if v.len() != len {
            return Err(Error::Shape("aggregated vectors differ in length".into()));
        }
        let w = s / total;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Mean loss and top-1 accuracy over a dataset.
pub fn evaluate(arch: &ModelArch, params: &[f64], ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 1000;
    let mut loss = 0.0;
    let mut correct = 0;
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(CHUNK) {
        let (x, y) = gather_rows(ds, chunk);
        let (l, c) = arch.loss_and_correct(params, &x, &y)?;
        loss += l * chunk.len() as f64;
        correct += c;
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Demapped aggregate update on the transmitted coordinates.
    pub update: Vec<f64>,
    pub saturated: usize,
    pub off_grid: usize,
}

/// Snap combined symbols to the grid and demap them into an update over the
/// shared clip range. The combined symbols already carry the aggregation
/// weights, so no further rescaling is applied.
pub fn aircomp_reconstruct(
    combined: &[Complex64],
    quantizer: &QuantizerConfig,
    constellation: &Constellation,
) -> Result<Reconstruction> {
    let d = demap(combined, quantizer, constellation)?;
    Ok(Reconstruction {
        update: d.values,
        saturated: d.saturated,
        off_grid: d.off_grid,
    })
}

//! Per-round error decomposition, the one-step descent bound, the
//! convergence rule and the latency models.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flcore::{gather_rows, ModelArch};
use crate::modem::{decision_target, demap, modulate, Constellation, QuantizerConfig};

/// `Υ = Σ_k σ²_k / |𝓝_k|`.
pub fn sampling_variance_bound(sigma2: &[f64], shard_sizes: &[f64]) -> Result<f64> {
    if sigma2.len() != shard_sizes.len() {
        return Err(Error::Shape(format!(
            "{} variances for {} shards",
            sigma2.len(),
            shard_sizes.len()
        )));
    }
    Ok(sigma2.iter().zip(shard_sizes).map(|(s, n)| s / n).sum())
}

/// Full-shard gradient and `σ²`, the mean squared deviation of the
/// minibatch gradients of one pass (consecutive batches of `order`) from it.
pub fn minibatch_gradient_variance(
    arch: &ModelArch,
    params: &[f64],
    shard: &Dataset,
    order: &[usize],
    batch: usize,
    l2: f64,
) -> Result<(Vec<f64>, f64)> {
    let all: Vec<usize> = (0..shard.len()).collect();
    let (x, y) = gather_rows(shard, &all);
    let (_, full) = arch.loss_and_grad(params, &x, &y, l2)?;
    let mut acc = 0.0;
    let mut count = 0;
    for rows in order.chunks(batch.max(1)) {
        let (x, y) = gather_rows(shard, rows);
        let (_, g) = arch.loss_and_grad(params, &x, &y, l2)?;
        acc += g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += 1;
    }
    Ok((full, acc / count.max(1) as f64))
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Error-free digital aggregate: modulate every vector, average the symbols
/// with the given weights, take the decision targets and demap.
pub fn error_free_aggregate(
    vectors: &[&[f64]],
    weights: &[f64],
    quantizer: &QuantizerConfig,
    constellation: &Constellation,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    if vectors.is_empty() || vectors.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} vectors for {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let mut sums: Vec<Complex64> = Vec::new();
    for (k, (v, &w)) in vectors.iter().zip(weights).enumerate() {
        let frame = modulate(v, quantizer, constellation, k, 0)?;
        if sums.is_empty() {
            sums = vec![Complex64::new(0.0, 0.0); frame.len()];
        }
        for (s, z) in sums.iter_mut().zip(&frame.symbols) {
            *s += z * w;
        }
    }
    let total: f64 = weights.iter().sum();
    let target = decision_target(&sums, total, constellation)?;
    let values = demap(&target.points, quantizer, constellation)?.values;
    Ok((values, target.points))
}

/// `‖ideal weighted average − error-free digital aggregate‖`.
pub fn modulation_error(
    vectors: &[&[f64]],
    weights: &[f64],
    quantizer: &QuantizerConfig,
    constellation: &Constellation,
) -> Result<f64> {
    let ideal = crate::flcore::ideal_aggregate(vectors, weights)?;
    let (digital, _) = error_free_aggregate(vectors, weights, quantizer, constellation)?;
    Ok(l2_dist(&ideal, &digital))
}

/// `‖l⁻¹(error-free targets) − l⁻¹(combined symbols)‖`.
pub fn transmission_error(
    error_free_points: &[Complex64],
    combined: &[Complex64],
    quantizer: &QuantizerConfig,
    constellation: &Constellation,
) -> Result<f64> {
    if error_free_points.len() != combined.len() {
        return Err(Error::Shape("symbol sequences differ in length".into()));
    }
    let a = demap(error_free_points, quantizer, constellation)?.values;
    let b = demap(combined, quantizer, constellation)?.values;
    Ok(l2_dist(&a, &b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// One-step bound:
/// `F(g_{t+1}) − F* ≤ (F(g_t) − F*) − ‖∇F(g_t)‖²/(2L) + (‖e‖ + ‖ê‖)²/(2L)`.
/// `lhs` is the realised (or averaged) `F(g_{t+1}) − F*`.
#[allow(clippy::too_many_arguments)]
pub fn descent_bound_check(
    f_t: f64,
    f_star: f64,
    grad_norm: f64,
    e: f64,
    e_hat: f64,
    lipschitz: f64,
    lhs: f64,
    tolerance: f64,
) -> BoundCheck {
    let rhs = (f_t - f_star) - grad_norm * grad_norm / (2.0 * lipschitz)
        + (e + e_hat) * (e + e_hat) / (2.0 * lipschitz);
    BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + tolerance,
    }
}

pub const CONVERGENCE_WINDOW: usize = 5;
pub const CONVERGENCE_THRESHOLD: f64 = 1e-3;

/// Population variance of the last five losses is below 0.001.
pub fn convergence_detector(history: &[f64]) -> bool {
    if history.len() < CONVERGENCE_WINDOW {
        return false;
    }
    let w = &history[history.len() - CONVERGENCE_WINDOW..];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
    var < CONVERGENCE_THRESHOLD
}

/// 1-based round at which the detector first fires.
pub fn rounds_to_converge(history: &[f64]) -> Option<usize> {
    (CONVERGENCE_WINDOW..=history.len()).find(|&n| convergence_detector(&history[..n]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// Kernel side `M_i`.
    pub kernel: u64,
    /// Output feature-map side `K_i`.
    pub out_side: u64,
    pub c_in: u64,
    pub c_out: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub convs: Vec<ConvLayer>,
    /// Channels entering the final linear layer, `C^out_{I+1}`.
    pub linear_in: u64,
    /// Network output dimension `L_out`.
    pub linear_out: u64,
}

/// `O_FL = Σ_i M_i² K_i² C^in_i C^out_i + C^out_{I+1} L_out`.
pub fn op_count_fl(spec: &NetSpec) -> u128 {
    spec.convs
        .iter()
        .map(|l| {
            (l.kernel as u128).pow(2)
                * (l.out_side as u128).pow(2)
                * l.c_in as u128
                * l.c_out as u128
        })
        .sum::<u128>()
        + spec.linear_in as u128 * spec.linear_out as u128
}

/// `V = Σ_i M_i² C^in_i C^out_i + C^out_{I+1} L_out`.
pub fn param_count_fl(spec: &NetSpec) -> u128 {
    spec.convs
        .iter()
        .map(|l| (l.kernel as u128).pow(2) * l.c_in as u128 * l.c_out as u128)
        .sum::<u128>()
        + spec.linear_in as u128 * spec.linear_out as u128
}

/// Five same-padded 5×5 convolutions on 28×28 inputs, widths
/// 32-64-128-256-64, then a 64→10 linear layer.
pub fn fashion_mnist_reference_net() -> NetSpec {
    let widths = [1u64, 32, 64, 128, 256, 64];
    NetSpec {
        convs: widths
            .windows(2)
            .map(|w| ConvLayer {
                kernel: 5,
                out_side: 28,
                c_in: w[0],
                c_out: w[1],
            })
            .collect(),
        linear_in: 64,
        linear_out: 10,
    }
}

/// ResNet-18 style stack of 17 3×3 convolutions (stem plus four stages of
/// four, widths 64-128-256-512, halving the feature map between stages)
/// on a 1792-pixel-wide input, then a 512→10 linear layer.
pub fn cifar10_reference_net() -> NetSpec {
    let side = 1792;
    let mut convs = vec![ConvLayer {
        kernel: 3,
        out_side: side,
        c_in: 3,
        c_out: 64,
    }];
    let mut prev = 64;
    for stage in 0..4 {
        let width = 64 << stage;
        for _ in 0..4 {
            convs.push(ConvLayer {
                kernel: 3,
                out_side: side >> stage,
                c_in: prev,
                c_out: width,
            });
            prev = width;
        }
    }
    NetSpec {
        convs,
        linear_in: 512,
        linear_out: 10,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    /// Device clock `f_D` in cycles per second.
    pub cpu_freq: f64,
    /// Parameter-update operations per cycle `ε`.
    pub ops_per_cycle: f64,
    /// Chip time coefficient `ρ`.
    pub chip_coefficient: f64,
    /// Symbols per second on the uplink.
    pub symbol_rate: f64,
    /// Bandwidth used to turn bits per channel use into bits per second.
    pub bandwidth_hz: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            cpu_freq: 1e9,
            ops_per_cycle: 1e5,
            chip_coefficient: 1.0,
            symbol_rate: 64.0 * 15e3,
            bandwidth_hz: 64.0 * 15e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub mlp_update: f64,
    pub fl_update: f64,
    pub mlp_transmit: f64,
    pub fl_transmit: f64,
}

impl LatencyRecord {
    pub fn total(&self) -> f64 {
        self.mlp_update + self.fl_update + self.mlp_transmit + self.fl_transmit
    }
}

/// Payload sizes of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyInputs {
    /// Quantisation precision `α`.
    pub precision: u32,
    /// Bits carried per channel use by `l(·)`.
    pub bits_per_symbol: u32,
    pub model_params: u64,
    pub ops_fl: u128,
    /// Predictor input width `V′` and hidden size `D`; zero when the variant
    /// has no predictor.
    pub v_prime: u64,
    pub hidden: u64,
    /// Ergodic capacity in bits per second.
    pub capacity: f64,
}

/// Time to deliver `bits` packed `bits_per_symbol` per symbol: the larger of
/// the symbol-rate time and the capacity time. Zero capacity gives infinity.
pub fn transmit_time(bits: u128, bits_per_symbol: u32, params: &LatencyParams, capacity: f64) -> f64 {
    if bits == 0 {
        return 0.0;
    }
    if !(capacity > 0.0) || !(params.symbol_rate > 0.0) {
        return f64::INFINITY;
    }
    let bps = bits_per_symbol.max(1) as u128;
    let symbols = bits.div_ceil(bps);
    (symbols as f64 / params.symbol_rate).max(bits as f64 / capacity)
}

pub fn latency(params: &LatencyParams, inp: &LatencyInputs) -> LatencyRecord {
    let alpha = inp.precision as u128;
    let denom = params.ops_per_cycle * params.cpu_freq;
    let mlp_ops = 2 * inp.v_prime as u128 * inp.hidden as u128;
    LatencyRecord {
        mlp_update: (alpha * alpha * mlp_ops) as f64 / denom * params.chip_coefficient,
        fl_update: (inp.ops_fl * alpha * alpha) as f64 / denom * params.chip_coefficient,
        mlp_transmit: transmit_time(alpha * mlp_ops, inp.bits_per_symbol, params, inp.capacity),
        fl_transmit: transmit_time(
            inp.model_params as u128 * alpha,
            inp.bits_per_symbol,
            params,
            inp.capacity,
        ),
    }
}

//! One communication round: local training, modulation, update prediction,
//! beamforming, superposition, combining, reconstruction and predictor
//! training, for the proposed scheme and its baselines.

use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{aircomp_reconstruct, evaluate, ideal_aggregate, local_train, LocalTrainConfig, ModelArch};
use crate::beamform::{gain_alignment, optimize, BeamformerSet, OptimizerConfig};
use crate::channel::{ergodic_capacity, place_devices, receive_combine, sample_channel, uplink_superpose, CMatrix, FadingModel, MimoChannel, NoiseSpec};
use crate::data::Dataset;
use crate::diagnostics::{error_free_aggregate, latency, LatencyInputs, LatencyParams, LatencyRecord};
use crate::error::{Error, Result};
use crate::modem::{decision_target, modulate, BitMapping, Constellation, QuantizerConfig};
use crate::par;
use crate::predictor::{assemble_full_prediction, PredictionSlice, PredictorNet};
use crate::rng::{substream, Stream};

type C = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Proposed,
    Analog,
    Bpsk,
    NoMlp,
    Noiseless,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Proposed,
        Variant::Analog,
        Variant::Bpsk,
        Variant::NoMlp,
        Variant::Noiseless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::Analog => "analog",
            Variant::Bpsk => "bpsk",
            Variant::NoMlp => "no-mlp",
            Variant::Noiseless => "noiseless",
        }
    }

    fn uses_predictor(self) -> bool {
        matches!(self, Variant::Proposed | Variant::Noiseless)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::usage(
                    "variant",
                    format!("unknown variant `{s}`; expected proposed, analog, bpsk, no-mlp or noiseless"),
                )
            })
    }
}

/// Everything a round needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub variant: Variant,
    pub devices: usize,
    pub n_r: usize,
    pub n_t: usize,
    /// Per-slot transmit power budget `P0` in watts.
    pub device_power: f64,
    /// Receiver noise power `σ²` in watts.
    pub noise_var: f64,
    pub fading: FadingModel,
    pub pathloss_exponent: f64,
    pub radius: f64,
    pub min_radius: f64,
    pub qam_order: usize,
    pub mapping: BitMapping,
    pub bits_per_param: u32,
    /// Peak per-axis symbol power of the constellation.
    pub symbol_power: f64,
    pub block_len: usize,
    pub beam: OptimizerConfig,
    pub train: LocalTrainConfig,
    pub predictor_hidden: usize,
    pub predictor_rate: f64,
    pub predictor_steps: usize,
    /// Use each device's true update as its prediction.
    pub oracle_prediction: bool,
    /// Carry convolution kernels over an error-free orthogonal link.
    pub kernels_orthogonal: bool,
    pub latency: LatencyParams,
    pub capacity_draws: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::usage("devices", "must be positive"));
        }
        if self.n_r == 0 || self.n_t == 0 {
            return Err(Error::usage("antennas", "must be positive"));
        }
        if !(self.device_power > 0.0 && self.device_power.is_finite()) {
            return Err(Error::usage("device_power", "must be positive"));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::usage("noise", "must be non-negative"));
        }
        if !(self.min_radius > 0.0 && self.radius >= self.min_radius) {
            return Err(Error::usage("radius", "need 0 < min_radius <= radius"));
        }
        if self.block_len == 0 {
            return Err(Error::usage("block_len", "must be positive"));
        }
        if !(self.symbol_power > 0.0) {
            return Err(Error::usage("symbol_power", "must be positive"));
        }
        if !(self.predictor_rate >= 0.0 && self.predictor_rate.is_finite()) {
            return Err(Error::usage("predictor.learn_rate", "must be non-negative"));
        }
        self.beam.validate()?;
        self.train.validate()?;
        Ok(())
    }

    fn effective_noise(&self) -> f64 {
        if self.variant == Variant::Noiseless {
            0.0
        } else {
            self.noise_var
        }
    }
}

/// Fixed inputs of a run.
#[derive(Debug, Clone)]
pub struct Environment {
    pub arch: ModelArch,
    pub shards: Vec<Dataset>,
    pub train_eval: Dataset,
    pub test: Dataset,
    pub cfg: SimConfig,
    /// Model coordinates sent over the air, in transmission order.
    pub air_coords: Vec<usize>,
    /// Model coordinates sent over the orthogonal link.
    pub orthogonal_coords: Vec<usize>,
    /// Predictor coordinates (the last layer).
    pub slice_coords: Vec<usize>,
    /// Positions of `slice_coords` within `air_coords`.
    slice_air_pos: Vec<usize>,
    /// Ergodic uplink capacity in bits per second.
    pub capacity: f64,
    constellation: Constellation,
}

impl Environment {
    pub fn new(
        arch: ModelArch,
        shards: Vec<Dataset>,
        train_eval: Dataset,
        test: Dataset,
        cfg: SimConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        arch.validate()?;
        if shards.len() != cfg.devices {
            return Err(Error::Config(format!(
                "{} shards for {} devices",
                shards.len(),
                cfg.devices
            )));
        }
        let v = arch.param_count();
        let kernels = if cfg.kernels_orthogonal {
            arch.kernel_coords()
        } else {
            None
        };
        let (air_coords, orthogonal_coords): (Vec<usize>, Vec<usize>) = match &kernels {
            Some(r) => (0..v).partition(|i| !r.contains(i)),
            None => ((0..v).collect(), Vec::new()),
        };
        let slice_coords: Vec<usize> = arch.last_layer().collect();
        let slice_air_pos = slice_coords
            .iter()
            .map(|c| air_coords.binary_search(c).expect("last layer is sent over the air"))
            .collect();
        let constellation = match cfg.variant {
            Variant::Bpsk => Constellation::bpsk(cfg.symbol_power)?,
            _ => Constellation::qam(cfg.qam_order, cfg.symbol_power, cfg.mapping)?,
        };
        if matches!(cfg.variant, Variant::Proposed | Variant::NoMlp | Variant::Noiseless) {
            QuantizerConfig::new(cfg.bits_per_param, 1.0)?.layout(&constellation)?;
        }
        let capacity = if cfg.effective_noise() == 0.0 {
            f64::INFINITY
        } else {
            let snr = cfg.device_power / cfg.noise_var;
            let mut rng = substream(cfg.seed, Stream::Audit, 0, 0, 0);
            cfg.latency.bandwidth_hz
                * ergodic_capacity(cfg.fading, cfg.n_r, cfg.n_t, snr, cfg.capacity_draws.max(1), &mut rng)?
        };
        Ok(Self {
            arch,
            shards,
            train_eval,
            test,
            cfg,
            air_coords,
            orthogonal_coords,
            slice_coords,
            slice_air_pos,
            capacity,
            constellation,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.shards.iter().map(|s| s.len() as f64).collect()
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    /// Initial state: seeded model, device placement and predictors.
    pub fn initial_state(&self) -> SimState {
        let seed = self.cfg.seed;
        let global = self.arch.init(&mut substream(seed, Stream::ModelInit, 0, 0, 0));
        let distances = place_devices(
            self.cfg.devices,
            self.cfg.radius,
            self.cfg.min_radius,
            &mut substream(seed, Stream::Placement, 0, 0, 0),
        );
        let predictors = if self.cfg.variant.uses_predictor() {
            (0..self.cfg.devices)
                .map(|k| {
                    PredictorNet::new(
                        self.slice_coords.len(),
                        self.cfg.predictor_hidden,
                        self.cfg.predictor_rate,
                        &mut substream(seed, Stream::PredictorInit, k as u64, 0, 0),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        SimState {
            round: 0,
            prev_global: global.clone(),
            global,
            predictors,
            distances,
            warm: Vec::new(),
        }
    }

    fn latency_inputs(&self) -> LatencyInputs {
        let (precision, bits_per_symbol) = match self.cfg.variant {
            Variant::Analog => (32, 64),
            Variant::Bpsk => (1, 1),
            _ => (self.cfg.bits_per_param, self.constellation.bits_per_symbol()),
        };
        let (v_prime, hidden) = if self.cfg.variant.uses_predictor() {
            (self.slice_coords.len() as u64, self.cfg.predictor_hidden as u64)
        } else {
            (0, 0)
        };
        LatencyInputs {
            precision,
            bits_per_symbol,
            model_params: self.air_coords.len() as u64,
            ops_fl: self.arch.op_count(),
            v_prime,
            hidden,
            capacity: self.capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub round: usize,
    pub global: Vec<f64>,
    pub prev_global: Vec<f64>,
    pub predictors: Vec<PredictorNet>,
    pub distances: Vec<f64>,
    /// Last beamformers per block, for warm starts.
    pub warm: Vec<BeamformerSet>,
}

/// Deterministic per-round measurements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub local_loss: f64,
    pub clip: f64,
    /// `‖reconstructed update − ideal weighted update‖`.
    pub aggregate_error: f64,
    pub modulation_error: f64,
    pub transmission_error: f64,
    pub beam_objective: f64,
    pub beam_iterations: usize,
    pub degenerate_slots: usize,
    pub saturated: usize,
    pub off_grid: usize,
    pub prediction_mse: f64,
    pub symbols: usize,
    pub blocks: usize,
    pub latency: LatencyRecord,
}

/// Wall-clock split of a round, kept apart from the deterministic record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub train_s: f64,
    pub beamform_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Default)]
struct AirResult {
    update: Vec<f64>,
    modulation_error: f64,
    transmission_error: f64,
    beam_objective: f64,
    beam_iterations: usize,
    degenerate_slots: usize,
    saturated: usize,
    off_grid: usize,
    prediction_mse: f64,
    symbols: usize,
    blocks: usize,
    clip: f64,
    warm: Vec<BeamformerSet>,
    beam_s: f64,
}

fn max_abs(vs: &[Vec<f64>]) -> f64 {
    vs.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn block_ranges(total: usize, block: usize) -> Vec<std::ops::Range<usize>> {
    (0..total.div_ceil(block))
        .map(|b| b * block..((b + 1) * block).min(total))
        .collect()
}

fn trim(set: &BeamformerSet, len: usize) -> BeamformerSet {
    BeamformerSet {
        transmit: set.transmit.iter().map(|a| a.columns(0, len).into_owned()).collect(),
        receive: set.receive.columns(0, len).into_owned(),
    }
}

/// Superpose and combine one block with fixed beamformers.
fn transmit_block(
    env: &Environment,
    frames: &[&[C]],
    set: &BeamformerSet,
    channels: &[MimoChannel],
    round: usize,
    block: usize,
) -> Result<Vec<C>> {
    let sigma2 = env.cfg.effective_noise();
    let spec = NoiseSpec::new(sigma2)?;
    let mut rng = substream(env.cfg.seed, Stream::Noise, round as u64, block as u64, 0);
    let noise = (sigma2 > 0.0).then_some((&spec, &mut rng));
    let y = uplink_superpose(frames, &set.transmit, channels, noise, Some(env.cfg.device_power))?;
    receive_combine(&y, &set.receive)
}

/// Data-independent beamformers shared by every slot.
fn aligned_set(env: &Environment, channels: &[MimoChannel]) -> Result<(BeamformerSet, f64)> {
    let (set, trace) = gain_alignment(
        channels,
        &env.weights(),
        env.cfg.device_power,
        env.cfg.effective_noise(),
        &env.cfg.beam,
        env.cfg.block_len,
    )?;
    Ok((set, trace.last().copied().unwrap_or(0.0)))
}

fn digital_round(
    env: &Environment,
    state: &SimState,
    air: &[Vec<f64>],
    channels: &[MimoChannel],
) -> Result<AirResult> {
    let cfg = &env.cfg;
    let weights = env.weights();
    let total: f64 = weights.iter().sum();
    let n_air = env.air_coords.len();
    let clip = max_abs(air);
    if clip == 0.0 {
        return Ok(AirResult {
            update: vec![0.0; n_air],
            ..Default::default()
        });
    }
    let quant = QuantizerConfig::new(cfg.bits_per_param, clip)?;
    let cons = &env.constellation;
    let frames: Vec<Vec<C>> = par::map_slice(air, |u| modulate(u, &quant, cons, 0, state.round).map(|f| f.symbols))
        .into_iter()
        .collect::<Result<_>>()?;

    // Updates the server expects from each device.
    let mut prediction_mse = 0.0;
    let predicted: Vec<Vec<f64>> = if cfg.oracle_prediction {
        air.to_vec()
    } else {
        match cfg.variant {
            Variant::NoMlp => {
                let last: Vec<f64> = env
                    .air_coords
                    .iter()
                    .map(|&i| state.global[i] - state.prev_global[i])
                    .collect();
                vec![last; cfg.devices]
            }
            _ => {
                let input = PredictionSlice::gather(&env.slice_coords, &state.global);
                let mut out = Vec::with_capacity(cfg.devices);
                for (k, net) in state.predictors.iter().enumerate() {
                    let p: Vec<f64> = net.predict(&input)?.into_iter().map(|v| v * clip).collect();
                    let truth = PredictionSlice::gather(&env.slice_air_pos, &air[k]);
                    prediction_mse += p
                        .iter()
                        .zip(&truth)
                        .map(|(a, b)| ((a - b) / clip).powi(2))
                        .sum::<f64>()
                        / p.len().max(1) as f64;
                    let slice = PredictionSlice::new(env.slice_air_pos.clone(), p, n_air)?;
                    out.push(assemble_full_prediction(&slice, n_air)?);
                }
                prediction_mse /= cfg.devices as f64;
                out
            }
        }
    };
    let pred_frames: Vec<Vec<C>> = par::map_slice(&predicted, |u| {
        modulate(u, &quant, cons, 0, state.round).map(|f| f.symbols)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let symbols = frames[0].len();
    let mut sums = vec![C::new(0.0, 0.0); symbols];
    for (f, &w) in pred_frames.iter().zip(&weights) {
        for (s, z) in sums.iter_mut().zip(f) {
            *s += z * w;
        }
    }
    let targets = decision_target(&sums, total, cons)?;

    let air_refs: Vec<&[f64]> = air.iter().map(|v| v.as_slice()).collect();
    let ideal = ideal_aggregate(&air_refs, &weights)?;
    let (error_free, error_free_points) = error_free_aggregate(&air_refs, &weights, &quant, cons)?;

    let (init, _) = aligned_set(env, channels)?;
    let mut combined = Vec::with_capacity(symbols);
    let mut res = AirResult {
        clip,
        prediction_mse,
        symbols,
        saturated: targets.saturated,
        ..Default::default()
    };
    let mut beam_s = 0.0;
    for (b, range) in block_ranges(symbols, cfg.block_len).into_iter().enumerate() {
        let len = range.len();
        let start = match state.warm.get(b) {
            Some(w) if cfg.beam.warm_start && w.slots() == len => w.clone(),
            _ => trim(&init, len),
        };
        let pf: Vec<&[C]> = pred_frames.iter().map(|f| &f[range.clone()]).collect();
        let tb = Instant::now();
        let (set, report) = optimize(
            channels,
            &pf,
            &targets.points[range.clone()],
            cfg.device_power,
            cfg.effective_noise(),
            &cfg.beam,
            Some(&start),
        )?;
        beam_s += tb.elapsed().as_secs_f64();
        let set = if report.all_degenerate { trim(&init, len) } else { set };
        res.beam_objective += report.final_objective();
        res.beam_iterations = res.beam_iterations.max(report.outer_iterations);
        log::debug!(
            "block {b}: mean outer {:.2}, inner capped {}",
            report.total_outer_iterations as f64 / len as f64,
            report.inner_capped
        );
        res.degenerate_slots += report.degenerate_slots;
        let tf: Vec<&[C]> = frames.iter().map(|f| &f[range.clone()]).collect();
        combined.extend(transmit_block(env, &tf, &set, channels, state.round, b)?);
        res.warm.push(set);
        res.blocks += 1;
    }
    res.beam_s = beam_s;

    let recon = aircomp_reconstruct(&combined, &quant, cons)?;
    res.saturated += recon.saturated;
    res.off_grid = recon.off_grid;
    res.modulation_error = dist(&ideal, &error_free);
    res.transmission_error =
        crate::diagnostics::transmission_error(&error_free_points, &combined, &quant, cons)?;
    res.update = recon.update;
    Ok(res)
}

fn analog_round(env: &Environment, state: &SimState, air: &[Vec<f64>], channels: &[MimoChannel]) -> Result<AirResult> {
    let n_air = env.air_coords.len();
    let clip = max_abs(air);
    if clip == 0.0 {
        return Ok(AirResult {
            update: vec![0.0; n_air],
            ..Default::default()
        });
    }
    let scale = env.cfg.symbol_power.sqrt() / clip;
    let frames: Vec<Vec<C>> = air
        .iter()
        .map(|u| {
            u.chunks(2)
                .map(|p| C::new(p[0], p.get(1).copied().unwrap_or(0.0)) * scale)
                .collect()
        })
        .collect();
    let tb = Instant::now();
    let (init, objective) = aligned_set(env, channels)?;
    let beam_s = tb.elapsed().as_secs_f64();
    let symbols = frames[0].len();
    let mut combined = Vec::with_capacity(symbols);
    let mut blocks = 0;
    for (b, range) in block_ranges(symbols, env.cfg.block_len).into_iter().enumerate() {
        let set = trim(&init, range.len());
        let tf: Vec<&[C]> = frames.iter().map(|f| &f[range.clone()]).collect();
        combined.extend(transmit_block(env, &tf, &set, channels, state.round, b)?);
        blocks += 1;
    }
    let mut update = Vec::with_capacity(n_air);
    for z in &combined {
        update.push(z.re / scale);
        update.push(z.im / scale);
    }
    update.truncate(n_air);
    let weights = env.weights();
    let refs: Vec<&[f64]> = air.iter().map(|v| v.as_slice()).collect();
    let ideal = ideal_aggregate(&refs, &weights)?;
    Ok(AirResult {
        transmission_error: dist(&ideal, &update),
        update,
        beam_objective: objective * blocks as f64,
        symbols,
        blocks,
        clip,
        beam_s,
        ..Default::default()
    })
}

fn bpsk_round(env: &Environment, state: &SimState, air: &[Vec<f64>], channels: &[MimoChannel]) -> Result<AirResult> {
    let n_air = env.air_coords.len();
    let amp = env.cfg.symbol_power.sqrt();
    let frames: Vec<Vec<C>> = air
        .iter()
        .map(|u| u.iter().map(|&v| C::new(if v < 0.0 { -amp } else { amp }, 0.0)).collect())
        .collect();
    // Server step: mean magnitude of the local updates.
    let step = air
        .iter()
        .map(|u| u.iter().map(|v| v.abs()).sum::<f64>() / u.len().max(1) as f64)
        .sum::<f64>()
        / air.len() as f64;
    let tb = Instant::now();
    let (init, objective) = aligned_set(env, channels)?;
    let beam_s = tb.elapsed().as_secs_f64();
    let mut combined = Vec::with_capacity(n_air);
    let mut blocks = 0;
    for (b, range) in block_ranges(n_air, env.cfg.block_len).into_iter().enumerate() {
        let set = trim(&init, range.len());
        let tf: Vec<&[C]> = frames.iter().map(|f| &f[range.clone()]).collect();
        combined.extend(transmit_block(env, &tf, &set, channels, state.round, b)?);
        blocks += 1;
    }
    let update: Vec<f64> = combined
        .iter()
        .map(|z| {
            if z.re > 0.0 {
                step
            } else if z.re < 0.0 {
                -step
            } else {
                0.0
            }
        })
        .collect();
    let weights = env.weights();
    let refs: Vec<&[f64]> = air.iter().map(|v| v.as_slice()).collect();
    let ideal = ideal_aggregate(&refs, &weights)?;
    // Error-free majority with the same step.
    let error_free: Vec<f64> = (0..n_air)
        .map(|i| {
            let s: f64 = frames.iter().zip(&weights).map(|(f, w)| f[i].re * w).sum();
            if s > 0.0 {
                step
            } else if s < 0.0 {
                -step
            } else {
                0.0
            }
        })
        .collect();
    Ok(AirResult {
        modulation_error: dist(&ideal, &error_free),
        transmission_error: dist(&error_free, &update),
        update,
        beam_objective: objective * blocks as f64,
        symbols: n_air,
        blocks,
        clip: step,
        beam_s,
        ..Default::default()
    })
}

/// Execute one round. On error the caller keeps the previous state.
pub fn run_round(env: &Environment, state: &SimState) -> Result<(SimState, RoundOutcome, RoundTiming)> {
    let t0 = Instant::now();
    let cfg = &env.cfg;
    let t = state.round;
    let updates = par::map_range(cfg.devices, |k| {
        let mut rng = substream(cfg.seed, Stream::LocalTrain, k as u64, t as u64, 0);
        local_train(&env.arch, k, &state.global, &env.shards[k], &cfg.train, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let train_s = t0.elapsed().as_secs_f64();
    let weights = env.weights();
    let refs: Vec<&[f64]> = updates.iter().map(|u| u.update.as_slice()).collect();
    let ideal = ideal_aggregate(&refs, &weights)?;

    let channels = (0..cfg.devices)
        .map(|k| {
            let mut rng = substream(cfg.seed, Stream::Channel, k as u64, t as u64, 0);
            sample_channel(cfg.fading, cfg.n_r, cfg.n_t, state.distances[k], cfg.pathloss_exponent, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let air: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| PredictionSlice::gather(&env.air_coords, &u.update))
        .collect();
    let res = match cfg.variant {
        Variant::Analog => analog_round(env, state, &air, &channels)?,
        Variant::Bpsk => bpsk_round(env, state, &air, &channels)?,
        _ => digital_round(env, state, &air, &channels)?,
    };

    let mut global = state.global.clone();
    for (&i, v) in env.air_coords.iter().zip(&res.update) {
        global[i] += v;
    }
    for &i in &env.orthogonal_coords {
        global[i] += ideal[i];
    }
    if global.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!("round {t}: non-finite global model")));
    }
    let applied: Vec<f64> = global.iter().zip(&state.global).map(|(a, b)| a - b).collect();

    let mut predictors = state.predictors.clone();
    if cfg.variant.uses_predictor() && res.clip > 0.0 {
        let input = PredictionSlice::gather(&env.slice_coords, &state.global);
        for (net, u) in predictors.iter_mut().zip(&updates) {
            let target: Vec<f64> = PredictionSlice::gather(&env.slice_coords, &u.update)
                .into_iter()
                .map(|v| v / res.clip)
                .collect();
            for _ in 0..cfg.predictor_steps {
                let g = net.local_gradient(&input, &target)?;
                net.apply_gradient(&g, cfg.predictor_rate)?;
            }
        }
    }

    let (train_loss, _) = evaluate(&env.arch, &global, &env.train_eval)?;
    let (test_loss, test_accuracy) = evaluate(&env.arch, &global, &env.test)?;
    let outcome = RoundOutcome {
        round: t,
        train_loss,
        test_loss,
        test_accuracy,
        local_loss: updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64,
        clip: res.clip,
        aggregate_error: dist(&applied, &ideal),
        modulation_error: res.modulation_error,
        transmission_error: res.transmission_error,
        beam_objective: res.beam_objective,
        beam_iterations: res.beam_iterations,
        degenerate_slots: res.degenerate_slots,
        saturated: res.saturated,
        off_grid: res.off_grid,
        prediction_mse: res.prediction_mse,
        symbols: res.symbols,
        blocks: res.blocks,
        latency: latency(&cfg.latency, &env.latency_inputs()),
    };
    let next = SimState {
        round: t + 1,
        prev_global: state.global.clone(),
        global,
        predictors,
        distances: state.distances.clone(),
        warm: res.warm,
    };
    let timing = RoundTiming {
        train_s,
        beamform_s: res.beam_s,
        total_s: t0.elapsed().as_secs_f64(),
    };
    Ok((next, outcome, timing))
}

#[allow(dead_code)]
fn zero_set(channels: &[MimoChannel], w: usize) -> BeamformerSet {
    BeamformerSet {
        transmit: channels.iter().map(|h| CMatrix::zeros(h.n_t(), w)).collect(),
        receive: CMatrix::zeros(channels[0].n_r(), w),
    }
}

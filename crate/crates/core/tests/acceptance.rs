//! Acceptance suite. Prints one PASS/FAIL line per criterion, with the
//! measured quantities. The process exits nonzero only on implementation
//! defects: a failure of criteria 1-5 or 10, or of the control check inside
//! criterion 6. The bound's violation rate (6) and the comparisons against
//! published results (7-9) are reported without failing the build.
//!
//! Criteria 7 and 8 need Fashion-MNIST under `$AIRFL_DATA_ROOT` (or `data/`
//! at the workspace root); without it they report FAIL with the reason.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use airfl::beamform::{gain_alignment, objective, optimize, OptimizerConfig};
use airfl::channel::{
    complex_gaussian, ergodic_capacity, receive_combine, sample_channel, uplink_superpose, FadingModel,
    MimoChannel, NoiseSpec,
};
use airfl::data::{partition, synth_classification, Dataset, PartitionMode};
use airfl::diagnostics::{
    error_free_aggregate, fashion_mnist_reference_net, cifar10_reference_net, latency,
    minibatch_gradient_variance, modulation_error, op_count_fl, param_count_fl, rounds_to_converge,
    sampling_variance_bound, descent_bound_check, transmission_error, LatencyInputs, LatencyParams,
};
use airfl::flcore::round::Variant;
use airfl::flcore::{aircomp_reconstruct, gather_rows, ideal_aggregate, ArchKind, ModelArch};
use airfl::harness::stats::{mean, spearman_exact};
use airfl::harness::{load_data, simulate, DataBundle, DatasetKind, ExperimentConfig, DATA_ROOT_ENV};
use airfl::modem::{
    decision_target, demap, dequantize, min_distance, modulate, quantize, BitMapping, Constellation,
    QuantizerConfig,
};
use airfl::predictor::PredictorNet;
use airfl::rng::{substream, SimRng, Stream};
use num_complex::Complex64 as C;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

struct Outcome {
    pass: bool,
    detail: String,
    /// Self-consistency of the measurement; false means a defect, not a finding.
    sound: bool,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into(), sound: true }
}

// ---------------------------------------------------------------- 1

fn modem_exactness() -> Outcome {
    let start = Instant::now();
    let mut failures = 0;
    let mut cases = 0;
    for m in [4usize, 16, 64] {
        for alpha in [2u32, 4, 6] {
            for mapping in [BitMapping::NaturalBinary, BitMapping::Gray] {
                let cons = match Constellation::qam(m, 1.0, mapping) {
                    Ok(c) => c,
                    Err(_) => {
                        failures += 1;
                        continue;
                    }
                };
                let q = QuantizerConfig::new(alpha, 1.0).unwrap();
                let levels: Vec<u64> = (0..1u64 << alpha).collect();
                let values = dequantize(&levels, &q);
                let expect = dequantize(&quantize(&values, &q).unwrap(), &q);
                cases += levels.len();
                let got = modulate(&values, &q, &cons, 0, 0)
                    .and_then(|f| {
                        let snapped: Vec<C> = f.symbols.iter().map(|&z| cons.snap(z).0).collect();
                        demap(&snapped, &q, &cons)
                    })
                    .map(|d| d.values);
                match got {
                    Ok(v) if v == expect => {}
                    _ => failures += 1,
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 1.0,
        format!("{cases} levels over 18 (M, alpha, mapping) cases, {failures} failures, {secs:.3} s"),
    )
}

// ---------------------------------------------------------------- 2

fn xi_formula() -> Outcome {
    let xi = min_distance(64, 1.0).unwrap();
    let c1 = Constellation::qam(64, 1.0, BitMapping::NaturalBinary).unwrap();
    let c4 = Constellation::qam(64, 4.0, BitMapping::NaturalBinary).unwrap();
    let peak1 = *c1.axis_points().last().unwrap();
    let peak4 = *c4.axis_points().last().unwrap();
    let pass = xi == 2.0 / 7.0 && peak1 == 1.0 && peak4 == 2.0 && c1.axis_points()[0] == -1.0;
    outcome(pass, format!("xi = {xi:?} (2/7 = {:?}), peak amplitude {peak1} at P0=1, {peak4} at P0=4", 2.0 / 7.0))
}

// ---------------------------------------------------------------- 3

/// Grid built independently: `√P0·(2j − (√M − 1))/(√M − 1)`.
fn oracle_axis(m: usize, p0: f64) -> Vec<f64> {
    let side = (m as f64).sqrt() as usize;
    let s = (side - 1) as f64;
    (0..side).map(|j| p0.sqrt() * (2.0 * j as f64 - s) / s).collect()
}

/// Exhaustive nearest point; ties go to the smaller magnitude per axis.
fn oracle_nearest(z: C, axis: &[f64]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut key = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for (i, &x) in axis.iter().enumerate() {
        for (j, &y) in axis.iter().enumerate() {
            let d = (z.re - x).powi(2) + (z.im - y).powi(2);
            let k = (d, x.abs(), y.abs());
            let tie = (d - key.0).abs() <= 1e-12 * d.max(1e-300);
            if (!tie && d < key.0) || (tie && (k.1, k.2) < (key.1, key.2)) {
                key = k;
                best = (i, j);
            }
        }
    }
    best
}

fn index_of(v: f64, axis: &[f64]) -> usize {
    axis.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
        .unwrap()
        .0
}

fn decision_targets() -> Outcome {
    let mut rng = SimRng::seed_from_u64(3);
    let trials = 10_000;
    let mut mismatches = 0;
    for _ in 0..trials {
        let m = [4usize, 16, 64][rng.gen_range(0..3)];
        let p0 = rng.gen_range(0.1..4.0);
        let k = rng.gen_range(1..=8);
        let cons = Constellation::qam(m, p0, BitMapping::NaturalBinary).unwrap();
        let axis = oracle_axis(m, p0);
        // Superposed weighted grid points plus a perturbation that can leave the grid.
        let mut sum = C::new(0.0, 0.0);
        let mut total = 0.0;
        for _ in 0..k {
            let w = rng.gen_range(1.0..100.0);
            let p = C::new(axis[rng.gen_range(0..axis.len())], axis[rng.gen_range(0..axis.len())]);
            sum += p * w;
            total += w;
        }
        sum += complex_gaussian(&mut rng, 0.5 * p0) * total;
        let got = decision_target(&[sum], total, &cons).unwrap().points[0];
        let want = oracle_nearest(sum / total, &axis);
        if (index_of(got.re, &axis), index_of(got.im, &axis)) != want {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{trials} superpositions, K <= 8, M <= 64: {mismatches} mismatches"))
}

// ---------------------------------------------------------------- 4

struct Instance {
    channels: Vec<MimoChannel>,
    frames: Vec<Vec<C>>,
    targets: Vec<C>,
}

fn random_instance(rng: &mut SimRng, k: usize, n: usize, w: usize) -> Instance {
    Instance {
        channels: (0..k)
            .map(|_| sample_channel(FadingModel::Rayleigh, n, n, 1.0, 0.0, rng).unwrap())
            .collect(),
        frames: (0..k).map(|_| (0..w).map(|_| complex_gaussian(rng, 1.0)).collect()).collect(),
        targets: (0..w).map(|_| complex_gaussian(rng, 1.0)).collect(),
    }
}

/// Per slot, the best receive vector leaves `|t|²σ²/(‖r‖² + σ²)` with
/// `r = Σ_k H_k a_k s_k`; sample transmit vectors on the power sphere.
fn restart_oracle(inst: &Instance, p0: f64, sigma2: f64, samples: usize, rng: &mut SimRng) -> f64 {
    let w = inst.targets.len();
    let nt = inst.channels[0].gain.ncols();
    let mut best = vec![f64::INFINITY; w];
    for _ in 0..samples {
        let a: Vec<nalgebra::DVector<C>> = inst
            .channels
            .iter()
            .map(|_| {
                let v = nalgebra::DVector::from_fn(nt, |_, _| complex_gaussian(rng, 1.0));
                let norm = v.norm();
                v * C::new(p0.sqrt() / norm, 0.0)
            })
            .collect();
        for (i, b) in best.iter_mut().enumerate() {
            let mut r = nalgebra::DVector::<C>::zeros(inst.channels[0].gain.nrows());
            for (k, ch) in inst.channels.iter().enumerate() {
                r += &ch.gain * &a[k] * inst.frames[k][i];
            }
            let f = inst.targets[i].norm_sqr() * sigma2 / (r.norm_squared() + sigma2);
            *b = b.min(f);
        }
    }
    best.iter().sum()
}

fn beamforming() -> Outcome {
    let start = Instant::now();
    let mut rng = SimRng::seed_from_u64(4);
    let cfg = OptimizerConfig { tolerance: 1e-12, outer_iters: 60, ..Default::default() };
    let mut non_monotone = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=4);
        let inst = random_instance(&mut rng, k, n, 4);
        let sigma2 = rng.gen_range(0.01..2.0);
        let fr: Vec<&[C]> = inst.frames.iter().map(|f| f.as_slice()).collect();
        let (_, rep) = optimize(&inst.channels, &fr, &inst.targets, 1.0, sigma2, &cfg, None).unwrap();
        if rep.objective_trace.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-15) {
            non_monotone += 1;
        }
    }
    let mut worst_noiseless = 0.0f64;
    for _ in 0..50 {
        let (k, n) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
        let inst = random_instance(&mut rng, k, n, 8);
        let fr: Vec<&[C]> = inst.frames.iter().map(|f| f.as_slice()).collect();
        let (_, rep) = optimize(&inst.channels, &fr, &inst.targets, 1.0, 0.0, &cfg, None).unwrap();
        worst_noiseless = worst_noiseless.max(rep.final_objective());
    }
    let mut worst_ratio = 0.0f64;
    let default_cfg = OptimizerConfig::default();
    for _ in 0..10 {
        let inst = random_instance(&mut rng, 2, 2, 4);
        let fr: Vec<&[C]> = inst.frames.iter().map(|f| f.as_slice()).collect();
        let (set, rep) = optimize(&inst.channels, &fr, &inst.targets, 1.0, 1.0, &default_cfg, None).unwrap();
        let f = objective(&set, &inst.channels, &fr, &inst.targets, 1.0).unwrap();
        assert!((f - rep.final_objective()).abs() <= 1e-9 * f);
        let oracle = restart_oracle(&inst, 1.0, 1.0, 100_000, &mut rng);
        worst_ratio = worst_ratio.max(f / oracle);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = non_monotone == 0 && worst_noiseless <= 1e-12 && worst_ratio <= 1.05 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{non_monotone}/100 non-monotone traces; worst noiseless residual {worst_noiseless:.2e}; \
             worst ratio to 1e5-restart oracle {worst_ratio:.4} over 10 K=2/N=2/W=4 instances; {secs:.1} s"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn predictor_gradients() -> Outcome {
    let mut rng = SimRng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let v = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=8);
        let net = PredictorNet::new(v, d, 0.1, &mut rng);
        let x: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = net.local_gradient(&x, &y).unwrap().flatten();
        let p = net.flatten();
        let h = 1e-5;
        let fd: Vec<f64> = (0..p.len())
            .map(|i| {
                let mut a = p.clone();
                a[i] += h;
                let mut b = p.clone();
                b[i] -= h;
                let fa = PredictorNet::unflatten(v, d, 0.1, &a).unwrap().loss(&x, &y).unwrap();
                let fb = PredictorNet::unflatten(v, d, 0.1, &b).unwrap().loss(&x, &y).unwrap();
                (fa - fb) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    // Stationary target: a fixed model slice mapped to a fixed update.
    let (v, d) = (64, 16);
    let mut net = PredictorNet::new(v, d, 0.05, &mut rng);
    let x: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..v).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let before = net.loss(&x, &y).unwrap();
    for _ in 0..500 {
        let g = net.local_gradient(&x, &y).unwrap();
        net.apply_gradient(&g, 0.05).unwrap();
    }
    let after = net.loss(&x, &y).unwrap();
    let drop = before / after;
    outcome(
        worst <= 1e-4 && drop >= 1000.0,
        format!("worst relative gradient error {worst:.2e} over 50 nets; stationary loss {before:.3e} -> {after:.3e} ({drop:.1e}x) in 500 steps"),
    )
}

// ---------------------------------------------------------------- 6

struct AuditTask {
    arch: ModelArch,
    shards: Vec<Dataset>,
    all_x: Vec<f64>,
    all_y: Vec<u8>,
    l2: f64,
    lipschitz: f64,
}

impl AuditTask {
    fn loss(&self, g: &[f64]) -> f64 {
        self.arch.loss_and_grad(g, &self.all_x, &self.all_y, self.l2).unwrap().0
    }
    fn grad(&self, g: &[f64]) -> Vec<f64> {
        self.arch.loss_and_grad(g, &self.all_x, &self.all_y, self.l2).unwrap().1
    }
}

fn audit_task(seed: u64) -> AuditTask {
    let (k, per, dim) = (5, 40, 4);
    let ds = synth_classification(seed, 2, dim, k * per, 2.0).unwrap();
    let mut rng = substream(seed, Stream::Partition, 0, 0, 0);
    let part = partition(&ds, k, PartitionMode::Iid, Some(per), &mut rng).unwrap();
    let shards = part.assignment.iter().map(|rows| ds.subset(rows)).collect();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let (all_x, all_y) = gather_rows(&ds, &rows);
    let l2 = 0.1;
    // Softmax cross-entropy has logit curvature at most ½; the bias adds 1 to ‖x‖².
    let mean_sq = all_x.chunks(dim).map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        / ds.len() as f64;
    AuditTask {
        arch: ModelArch::new(ArchKind::LinearSoftmax, vec![dim], 2).unwrap(),
        shards,
        all_x,
        all_y,
        l2,
        lipschitz: 0.5 * mean_sq + l2,
    }
}

fn optimum(task: &AuditTask) -> f64 {
    let mut g = vec![0.0; task.arch.param_count()];
    for _ in 0..20_000 {
        let grad = task.grad(&g);
        for (x, d) in g.iter_mut().zip(&grad) {
            *x -= d / task.lipschitz;
        }
    }
    task.loss(&g)
}

struct AuditCell {
    next: Vec<f64>,
    e: f64,
    e_hat: f64,
    /// `e` with the realised `‖∇F − minibatch mean‖` in place of `Υ`.
    e_realised: f64,
    upsilon: f64,
    sampling: f64,
}

/// One gradient-domain digital AirComp step from `g`.
fn audit_step(task: &AuditTask, g: &[f64], channels: &[MimoChannel], sigma2: f64, rng: &mut SimRng) -> AuditCell {
    let batch = 10;
    let cons = Constellation::qam(64, 1.0, BitMapping::NaturalBinary).unwrap();
    let mut grads = Vec::new();
    let mut sigma = Vec::new();
    for shard in &task.shards {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(rng);
        let (x, y) = gather_rows(shard, &order[..batch]);
        grads.push(task.arch.loss_and_grad(g, &x, &y, task.l2).unwrap().1);
        let (_, s2) = minibatch_gradient_variance(&task.arch, g, shard, &order, batch, task.l2).unwrap();
        sigma.push(s2);
    }
    let weights = vec![batch as f64; grads.len()];
    let clip = grads.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let quant = QuantizerConfig::new(6, clip).unwrap();
    let refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
    let frames: Vec<Vec<C>> = grads.iter().map(|v| modulate(v, &quant, &cons, 0, 0).unwrap().symbols).collect();
    let (_, points) = error_free_aggregate(&refs, &weights, &quant, &cons).unwrap();
    let fr: Vec<&[C]> = frames.iter().map(|f| f.as_slice()).collect();
    let cfg = OptimizerConfig::default();
    let (init, _) = gain_alignment(channels, &weights, 1.0, sigma2, &cfg, points.len()).unwrap();
    let (set, _) = optimize(channels, &fr, &points, 1.0, sigma2, &cfg, Some(&init)).unwrap();
    let spec = NoiseSpec::new(sigma2).unwrap();
    let y = uplink_superpose(&fr, &set.transmit, channels, Some((&spec, rng)), Some(1.0)).unwrap();
    let combined = receive_combine(&y, &set.receive).unwrap();
    let update = aircomp_reconstruct(&combined, &quant, &cons).unwrap().update;
    let shard_sizes: Vec<f64> = task.shards.iter().map(|s| s.len() as f64).collect();
    let upsilon = sampling_variance_bound(&sigma, &shard_sizes).unwrap();
    let modulation = modulation_error(&refs, &weights, &quant, &cons).unwrap();
    let e_hat = transmission_error(&points, &combined, &quant, &cons).unwrap();
    let full = task.grad(g);
    let mb = ideal_aggregate(&refs, &weights).unwrap();
    let sampling = full.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let next = g.iter().zip(&update).map(|(w, u)| w - u / task.lipschitz).collect();
    AuditCell { next, e: modulation + upsilon, e_hat, e_realised: modulation + sampling, upsilon, sampling }
}

fn descent_bound_audit() -> Outcome {
    let start = Instant::now();
    let seed = 6;
    let task = audit_task(seed);
    let f_star = optimum(&task);
    let (rounds, draws) = (20, 50);
    let sigma2 = 0.1;
    let mut g = vec![0.0; task.arch.param_count()];
    let mut violations = 0;
    let mut control_violations = 0;
    let mut cells = 0;
    let (mut upsilon_sum, mut sampling_sum) = (0.0, 0.0);
    for t in 0..rounds {
        let mut crng = substream(seed, Stream::Channel, t, 0, 0);
        let channels: Vec<MimoChannel> = (0..task.shards.len())
            .map(|_| sample_channel(FadingModel::Rayleigh, 2, 2, 1.0, 0.0, &mut crng).unwrap())
            .collect();
        let f_t = task.loss(&g);
        let grad_norm = task.grad(&g).iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut follow = None;
        for d in 0..draws {
            let mut rng = substream(seed, Stream::Audit, t, d, 0);
            let cell = audit_step(&task, &g, &channels, sigma2, &mut rng);
            let lhs = task.loss(&cell.next) - f_star;
            let check = descent_bound_check(f_t, f_star, grad_norm, cell.e, cell.e_hat, task.lipschitz, lhs, 1e-12);
            let control =
                descent_bound_check(f_t, f_star, grad_norm, cell.e_realised, cell.e_hat, task.lipschitz, lhs, 1e-12);
            cells += 1;
            violations += usize::from(!check.holds);
            control_violations += usize::from(!control.holds);
            upsilon_sum += cell.upsilon;
            sampling_sum += cell.sampling;
            if d == 0 {
                follow = Some(cell.next);
            }
        }
        g = follow.unwrap();
    }
    let rate = violations as f64 / cells as f64;
    let secs = start.elapsed().as_secs_f64();
    let mut o = outcome(
        rate <= 0.05 && secs < 300.0,
        format!(
            "{violations}/{cells} violations ({:.1}%), L = {:.3}, final gap {:.2e}; mean Upsilon {:.2e} vs mean \
             realised sampling error {:.2e}; with the realised error in place of Upsilon {control_violations} \
             violations; {secs:.1} s",
            100.0 * rate,
            task.lipschitz,
            task.loss(&g) - f_star,
            upsilon_sum / cells as f64,
            sampling_sum / cells as f64,
        ),
    );
    o.sound = control_violations == 0;
    o
}

// ---------------------------------------------------------------- 7, 8

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const LOW_SNR_DB: f64 = 0.0;

#[allow(clippy::field_reassign_with_default)]
fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.devices = 10;
    cfg.samples_per_device = 2000;
    cfg.rounds = 20;
    cfg.arch = ArchKind::Mlp { hidden: 32 };
    cfg.train.learn_rate = 0.05;
    cfg.beamform.outer_iters = 10;
    cfg.dataset.kind = DatasetKind::FashionMnist;
    cfg.dataset.root = Some(data_root());
    cfg
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[derive(Clone, Copy, PartialEq, PartialOrd, Eq, Ord)]
struct CellKey {
    non_iid: bool,
    variant: Variant,
    snr_milli_db: Option<i64>,
    n_r: usize,
    devices: usize,
    seed: u64,
}

#[derive(Clone, Copy)]
struct CellResult {
    accuracy: f64,
    /// Rounds to converge; runs that never converge count as `rounds + 1`.
    rounds: f64,
}

struct Desk {
    data: DataBundle,
    cache: BTreeMap<CellKey, CellResult>,
}

impl Desk {
    fn run(&mut self, key: CellKey) -> CellResult {
        if let Some(r) = self.cache.get(&key) {
            return *r;
        }
        let mut cfg = desk_config();
        cfg.partition = if key.non_iid {
            PartitionMode::NonIid { labels_per_device: 6 }
        } else {
            PartitionMode::Iid
        };
        cfg.channel.snr_db = key.snr_milli_db.map(|s| s as f64 / 1000.0);
        cfg.channel.n_r = key.n_r;
        cfg.devices = key.devices;
        let run = simulate(&cfg, &self.data, key.variant, key.seed).unwrap();
        let res = CellResult {
            accuracy: run.converged_accuracy(),
            rounds: run.rounds_to_converge().map_or(cfg.rounds as f64 + 1.0, |r| r as f64),
        };
        self.cache.insert(key, res);
        res
    }

    fn seed_mean(&mut self, key: CellKey, f: fn(&CellResult) -> f64) -> f64 {
        let vals: Vec<f64> = SEEDS.iter().map(|&seed| f(&self.run(CellKey { seed, ..key }))).collect();
        mean(&vals)
    }
}

fn key(non_iid: bool, variant: Variant, snr_db: Option<f64>) -> CellKey {
    CellKey {
        non_iid,
        variant,
        snr_milli_db: snr_db.map(|s| (s * 1000.0).round() as i64),
        n_r: 2,
        devices: 10,
        seed: SEEDS[0],
    }
}

fn acc(r: &CellResult) -> f64 {
    r.accuracy
}

fn rtc(r: &CellResult) -> f64 {
    r.rounds
}

fn end_to_end(desk: &mut Desk) -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for non_iid in [false, true] {
        let noiseless = desk.seed_mean(key(non_iid, Variant::Noiseless, None), acc);
        let proposed = desk.seed_mean(key(non_iid, Variant::Proposed, None), acc);
        let proposed_low = desk.seed_mean(key(non_iid, Variant::Proposed, Some(LOW_SNR_DB)), acc);
        let analog_low = desk.seed_mean(key(non_iid, Variant::Analog, Some(LOW_SNR_DB)), acc);
        let bpsk = desk.seed_mean(key(non_iid, Variant::Bpsk, None), acc);
        let ok = noiseless >= proposed && proposed_low > analog_low && proposed - bpsk >= 0.05;
        pass &= ok;
        parts.push(format!(
            "{}: noiseless {noiseless:.4}, proposed {proposed:.4}, proposed@{LOW_SNR_DB}dB {proposed_low:.4}, \
             analog@{LOW_SNR_DB}dB {analog_low:.4}, bpsk {bpsk:.4} [{}]",
            if non_iid { "non-IID-6" } else { "IID" },
            if ok { "ok" } else { "ordering not met" }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 1800.0, format!("{}; {secs:.0} s", parts.join("; ")))
}

fn trends(desk: &mut Desk) -> Outcome {
    let start = Instant::now();
    let snrs = [-30.0, -20.0, -10.0, 0.0, 10.0];
    let snr_acc: Vec<f64> = snrs
        .iter()
        .map(|&s| desk.seed_mean(key(false, Variant::Proposed, Some(s)), acc))
        .collect();
    let snr_test = spearman_exact(&snrs, &snr_acc).unwrap();
    let snr_ok = snr_test.p_greater < 0.05;

    let nr2 = snr_acc[4];
    let nr4 = desk.seed_mean(CellKey { n_r: 4, ..key(false, Variant::Proposed, Some(10.0)) }, acc);
    let nr_ok = nr4 >= nr2;

    let ks = [2.0, 4.0, 6.0, 8.0, 10.0];
    let mut k_acc = Vec::new();
    let mut k_rtc = Vec::new();
    for &k in &ks {
        let ck = CellKey { devices: k as usize, ..key(false, Variant::Proposed, None) };
        k_acc.push(desk.seed_mean(ck, acc));
        k_rtc.push(desk.seed_mean(ck, rtc));
    }
    let k_acc_test = spearman_exact(&ks, &k_acc).unwrap();
    let k_rtc_test = spearman_exact(&ks, &k_rtc).unwrap();
    let k_ok = k_acc_test.p_greater < 0.05 && k_rtc_test.p_less < 0.05;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        snr_ok && nr_ok && k_ok,
        format!(
            "SNR {snrs:?} dB -> acc [{}], rho {:.2}, p {:.4} [{}]; N_r=4 {nr4:.4} vs N_r=2 {nr2:.4} at 10 dB [{}]; \
             K {ks:?} -> acc [{}] rho {:.2} p {:.4}, rounds [{}] rho {:.2} p {:.4} [{}]; {secs:.0} s",
            fmt(&snr_acc),
            snr_test.rho,
            snr_test.p_greater,
            if snr_ok { "ok" } else { "no significant decay" },
            if nr_ok { "ok" } else { "not met" },
            fmt(&k_acc),
            k_acc_test.rho,
            k_acc_test.p_greater,
            fmt(&k_rtc),
            k_rtc_test.rho,
            k_rtc_test.p_less,
            if k_ok { "ok" } else { "trend not significant" },
        ),
    )
}

// ---------------------------------------------------------------- 9

fn two_sig(x: f64) -> f64 {
    let e = x.abs().log10().floor() - 1.0;
    (x / 10f64.powf(e)).round() * 10f64.powf(e)
}

fn latency_formulas() -> Outcome {
    let fm = op_count_fl(&fashion_mnist_reference_net()) as f64;
    let cf = op_count_fl(&cifar10_reference_net()) as f64;
    let ops_ok = two_sig(fm) == 1.2e9 && two_sig(cf) == 1.7e12;

    // Hand substitution with every term written out.
    let p = LatencyParams::default();
    let inp = LatencyInputs {
        precision: 6,
        bits_per_symbol: 6,
        model_params: 1000,
        ops_fl: 2_000_000,
        v_prime: 640,
        hidden: 160,
        capacity: 5e6,
    };
    let r = latency(&p, &inp);
    let hand_mlp_u = 2.0 * 36.0 * 640.0 * 160.0 / (1e5 * 1e9) * 1.0;
    let hand_fl_u = 2e6 * 36.0 / (1e5 * 1e9) * 1.0;
    let hand_mlp_t = (2.0f64 * 6.0 * 640.0 * 160.0 / 6.0 / 960e3).max(2.0 * 6.0 * 640.0 * 160.0 / 5e6);
    let hand_fl_t = (6000.0f64 / 6.0 / 960e3).max(6000.0 / 5e6);
    let formulas_ok = r.mlp_update == hand_mlp_u
        && r.fl_update == hand_fl_u
        && r.mlp_transmit == hand_mlp_t
        && r.fl_transmit == hand_fl_t;

    // Per-round latency of the reference Fashion-MNIST net under the default link.
    let net = fashion_mnist_reference_net();
    let cfg = ExperimentConfig::default();
    let snr = cfg.channel.device_power_w() / cfg.channel.noise_watts();
    let mut rng = SimRng::seed_from_u64(9);
    let per_use = ergodic_capacity(FadingModel::Rayleigh, 2, 2, snr, 2000, &mut rng).unwrap();
    let capacity = per_use * p.bandwidth_hz;
    let row = |precision, bits_per_symbol, predictor: bool| {
        latency(
            &p,
            &LatencyInputs {
                precision,
                bits_per_symbol,
                model_params: param_count_fl(&net) as u64,
                ops_fl: op_count_fl(&net),
                v_prime: if predictor { 640 } else { 0 },
                hidden: if predictor { 160 } else { 0 },
                capacity,
            },
        )
        .total()
    };
    let rows = [("proposed", row(6, 6, true), 1.26), ("analog", row(32, 64, false), 1.03), ("bpsk", row(1, 1, false), 0.21)];
    let table_ok = rows.iter().all(|(_, ours, paper)| ours / paper <= 2.0 && paper / ours <= 2.0);
    let table: Vec<String> = rows
        .iter()
        .map(|(n, ours, paper)| format!("{n} {ours:.3} s vs {paper} s ({:.2}x)", ours / paper))
        .collect();
    outcome(
        ops_ok && formulas_ok && table_ok,
        format!(
            "O_FL {fm:.4e} -> {:.1e}, {cf:.4e} -> {:.1e} [{}]; latency terms by hand [{}]; per-round: {} [{}]",
            two_sig(fm),
            two_sig(cf),
            if ops_ok { "ok" } else { "mismatch" },
            if formulas_ok { "exact" } else { "mismatch" },
            table.join(", "),
            if table_ok { "within 2x" } else { "outside 2x" }
        ),
    )
}

// ---------------------------------------------------------------- 10

fn detector() -> Outcome {
    // Population variances of the five-round windows ending at rounds 5..9:
    // 0.3581, 0.0778, 0.0099, 0.00062, 0.00005.
    let losses = [2.0, 1.0, 0.5, 0.3, 0.25, 0.24, 0.24, 0.23, 0.23];
    let got = rounds_to_converge(&losses);
    let flat = rounds_to_converge(&[0.5; 5]);
    let oscillating = rounds_to_converge(&[1.0, 0.9, 1.0, 0.9, 1.0, 0.9, 1.0]);
    let short = rounds_to_converge(&[0.5; 4]);
    let pass = got == Some(8) && flat == Some(5) && oscillating.is_none() && short.is_none();
    outcome(
        pass,
        format!("hand trajectory converges at {got:?} (expected Some(8)); flat {flat:?}; oscillating {oscillating:?}; 4 rounds {short:?}"),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters from the default harness are ignored.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut hard_failure = false;
    let mut report = |id: u32, name: &str, hard: bool, o: Outcome| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.sound || (hard && !o.pass) {
            hard_failure = true;
        }
    };
    report(1, "modem exactness", true, modem_exactness());
    report(2, "grid spacing", true, xi_formula());
    report(3, "decision targets", true, decision_targets());
    report(4, "beamforming optimizer", true, beamforming());
    report(5, "predictor gradients", true, predictor_gradients());
    report(6, "one-step descent bound", false, descent_bound_audit());
    let cfg = desk_config();
    match load_data(&cfg, cfg.seed) {
        Ok(data) => {
            let mut desk = Desk { data, cache: BTreeMap::new() };
            report(7, "end-to-end ordering", false, end_to_end(&mut desk));
            report(8, "trend reproduction", false, trends(&mut desk));
        }
        Err(e) => {
            report(7, "end-to-end ordering", false, outcome(false, e.to_string()));
            report(8, "trend reproduction", false, outcome(false, e.to_string()));
        }
    }
    report(9, "latency formulas", false, latency_formulas());
    report(10, "convergence detector", true, detector());
    if hard_failure {
        std::process::exit(1);
    }
}

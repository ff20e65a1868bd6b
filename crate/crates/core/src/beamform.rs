//! Joint transmit/receive beamforming that steers the superposed signal onto
//! target constellation points.
//!
//! For slot `i` the expected cost is
//! `|a*_i − b_iᴴ Σ_k H_k a_{k,i} d_{k,i}|² + σ² ‖b_i‖²`, subject to
//! `‖a_{k,i}‖² ≤ P0`. The problem separates across slots, so every slot runs
//! its own alternation between a projected-gradient transmit step and the
//! closed-form receive step.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{CMatrix, MimoChannel};
use crate::error::{Error, Result};
use crate::par;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);

/// Slots whose effective received power falls below this fraction of the
/// incoherent power are treated as degenerate.
const DEGENERATE_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Maximum outer alternations `L_O`.
    pub outer_iters: usize,
    /// Maximum projected-gradient steps per transmit solve.
    pub inner_iters: usize,
    /// Step as a fraction of `1/Lipschitz`, in `(0, 1]`.
    pub step_size: f64,
    /// Relative objective improvement below which a loop stops.
    pub tolerance: f64,
    /// Initialise from the previous block's beamformers when shapes allow.
    pub warm_start: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            outer_iters: 100,
            inner_iters: 50,
            step_size: 1.0,
            tolerance: 1e-3,
            warm_start: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::usage("beamform.outer_iters", "must be positive"));
        }
        if self.inner_iters == 0 {
            return Err(Error::usage("beamform.inner_iters", "must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::usage("beamform.step_size", "must lie in (0, 1]"));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::usage("beamform.tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// Per-device transmit matrices (`N_t × W`) and the receive matrix (`N_r × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub transmit: Vec<CMatrix>,
    pub receive: CMatrix,
}

impl BeamformerSet {
    pub fn zeros(channels: &[MimoChannel], slots: usize) -> Self {
        let n_r = channels.first().map_or(0, |h| h.n_r());
        Self {
            transmit: channels.iter().map(|h| CMatrix::zeros(h.n_t(), slots)).collect(),
            receive: CMatrix::zeros(n_r, slots),
        }
    }

    pub fn slots(&self) -> usize {
        self.receive.ncols()
    }

    /// Largest per-slot transmit power over all devices and slots.
    pub fn max_slot_power(&self) -> f64 {
        self.transmit
            .iter()
            .flat_map(|a| a.column_iter().map(|c| c.norm_squared()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    fn slot_transmit(&self, i: usize) -> Vec<Vec<C>> {
        self.transmit
            .iter()
            .map(|a| a.column(i).iter().copied().collect())
            .collect()
    }

    fn slot_receive(&self, i: usize) -> Vec<C> {
        self.receive.column(i).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizeReport {
    /// Total objective after each outer iteration; index 0 is the initial point
    /// with its optimal receive combiner.
    pub objective_trace: Vec<f64>,
    pub outer_iterations: usize,
    /// Outer alternations summed over slots.
    pub total_outer_iterations: usize,
    pub degenerate_slots: usize,
    /// Transmit solves that hit `inner_iters` before meeting the tolerance.
    pub inner_capped: usize,
    /// Every slot was degenerate; the returned beamformers are zero.
    pub all_degenerate: bool,
}

impl OptimizeReport {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

fn check_shapes(channels: &[MimoChannel], frames: &[&[C]], slots: usize) -> Result<()> {
    if channels.is_empty() || channels.len() != frames.len() {
        return Err(Error::Shape(format!(
            "{} channels for {} frames",
            channels.len(),
            frames.len()
        )));
    }
    let n_r = channels[0].n_r();
    for (k, (h, f)) in channels.iter().zip(frames).enumerate() {
        if h.n_r() != n_r {
            return Err(Error::Shape(format!("device {k} has {} receive antennas", h.n_r())));
        }
        if f.len() != slots {
            return Err(Error::Shape(format!(
                "frame {k} has {} symbols, expected {slots}",
                f.len()
            )));
        }
    }
    Ok(())
}

fn check_set(set: &BeamformerSet, channels: &[MimoChannel]) -> Result<()> {
    if set.transmit.len() != channels.len() {
        return Err(Error::Shape(format!(
            "{} transmit matrices for {} devices",
            set.transmit.len(),
            channels.len()
        )));
    }
    let w = set.slots();
    for (k, (a, h)) in set.transmit.iter().zip(channels).enumerate() {
        if a.nrows() != h.n_t() || a.ncols() != w {
            return Err(Error::Shape(format!(
                "device {k}: transmit {}x{}, expected {}x{w}",
                a.nrows(),
                a.ncols(),
                h.n_t()
            )));
        }
    }
    if set.receive.nrows() != channels[0].n_r() {
        return Err(Error::Shape(format!(
            "receive matrix has {} rows for {} antennas",
            set.receive.nrows(),
            channels[0].n_r()
        )));
    }
    Ok(())
}

fn norm_sqr(v: &[C]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// `H a` for a column-major `n_r × n_t` slice.
fn apply_h(h: &[C], n_r: usize, a: &[C], out: &mut [C]) {
    out.iter_mut().for_each(|z| *z = ZERO);
    for (t, &at) in a.iter().enumerate() {
        let col = &h[t * n_r..(t + 1) * n_r];
        for (o, &hv) in out.iter_mut().zip(col) {
            *o += hv * at;
        }
    }
}

/// `Hᴴ b` for a column-major `n_r × n_t` slice.
fn apply_hh(h: &[C], n_r: usize, b: &[C], out: &mut [C]) {
    for (t, o) in out.iter_mut().enumerate() {
        let col = &h[t * n_r..(t + 1) * n_r];
        *o = col.iter().zip(b).map(|(hv, bv)| hv.conj() * bv).sum();
    }
}

fn project(a: &mut [C], p0: f64) {
    let p = norm_sqr(a);
    if p > p0 {
        let mut s = (p0 / p).sqrt();
        a.iter_mut().for_each(|z| *z *= s);
        while norm_sqr(a) > p0 {
            s = 1.0 - 1e-15;
            a.iter_mut().for_each(|z| *z *= s);
        }
    }
}

/// One slot of the steering problem.
struct Slot<'a> {
    gains: &'a [&'a [C]],
    dims: &'a [(usize, usize)],
    n_r: usize,
    data: Vec<C>,
    target: C,
}

struct SlotOutcome {
    a: Vec<Vec<C>>,
    b: Vec<C>,
    trace: Vec<f64>,
    degenerate: bool,
    inner_capped: usize,
}

impl<'a> Slot<'a> {
    /// `r = Σ_k H_k a_k d_k` and the incoherent power `Σ_k ‖H_k a_k d_k‖²`.
    fn received(&self, a: &[Vec<C>]) -> (Vec<C>, f64) {
        let mut r = vec![ZERO; self.n_r];
        let mut tmp = vec![ZERO; self.n_r];
        let mut incoherent = 0.0;
        for (k, ak) in a.iter().enumerate() {
            apply_h(self.gains[k], self.n_r, ak, &mut tmp);
            let d = self.data[k];
            let mut p = 0.0;
            for (ri, &ti) in r.iter_mut().zip(&tmp) {
                let v = ti * d;
                p += v.norm_sqr();
                *ri += v;
            }
            incoherent += p;
        }
        (r, incoherent)
    }

    fn objective(&self, a: &[Vec<C>], b: &[C], sigma2: f64) -> f64 {
        let (r, _) = self.received(a);
        let s: C = b.iter().zip(&r).map(|(bv, rv)| bv.conj() * rv).sum();
        (self.target - s).norm_sqr() + sigma2 * norm_sqr(b)
    }

    /// Closed-form receive vector; `None` for a degenerate slot.
    fn receive(&self, a: &[Vec<C>], sigma2: f64) -> Option<Vec<C>> {
        let (r, incoherent) = self.received(a);
        let rr = norm_sqr(&r);
        if incoherent <= 0.0 || rr <= DEGENERATE_REL * incoherent {
            return None;
        }
        let scale = self.target.conj() / (rr + sigma2);
        Some(r.into_iter().map(|z| z * scale).collect())
    }

    /// Projected gradient on `|t − Σ_k g_kᴴ a_k|²` with `g_k = conj(d_k) H_kᴴ b`.
    /// Returns whether the tolerance was met within the step budget.
    fn transmit(&self, b: &[C], a: &mut [Vec<C>], p0: f64, cfg: &OptimizerConfig) -> bool {
        let g: Vec<Vec<C>> = (0..a.len())
            .map(|k| {
                let mut c = vec![ZERO; self.dims[k].1];
                apply_hh(self.gains[k], self.n_r, b, &mut c);
                let dc = self.data[k].conj();
                c.iter_mut().for_each(|z| *z *= dc);
                c
            })
            .collect();
        let lipschitz: f64 = g.iter().map(|v| norm_sqr(v)).sum();
        if lipschitz <= 0.0 {
            return true;
        }
        let eta = cfg.step_size / lipschitz;
        let steer = |a: &[Vec<C>]| -> C {
            g.iter()
                .zip(a)
                .map(|(gk, ak)| gk.iter().zip(ak).map(|(x, y)| x.conj() * y).sum::<C>())
                .sum()
        };
        let mut err = self.target - steer(a);
        let mut f = err.norm_sqr();
        let mut next: Vec<Vec<C>> = a.to_vec();
        for _ in 0..cfg.inner_iters {
            if f == 0.0 {
                return true;
            }
            for ((nk, ak), gk) in next.iter_mut().zip(a.iter()).zip(&g) {
                for ((n, &x), &gv) in nk.iter_mut().zip(ak).zip(gk) {
                    *n = x + gv * (err * eta);
                }
                project(nk, p0);
            }
            let e_new = self.target - steer(&next);
            let f_new = e_new.norm_sqr();
            if f_new > f {
                return true;
            }
            for (ak, nk) in a.iter_mut().zip(&next) {
                ak.copy_from_slice(nk);
            }
            let gain = f - f_new;
            err = e_new;
            f = f_new;
            if gain <= cfg.tolerance * (f + gain) {
                return true;
            }
        }
        false
    }

    fn solve(
        &self,
        mut a: Vec<Vec<C>>,
        p0: f64,
        sigma2: f64,
        cfg: &OptimizerConfig,
    ) -> SlotOutcome {
        for ak in a.iter_mut() {
            project(ak, p0);
        }
        let zero_b = vec![ZERO; self.n_r];
        let Some(mut b) = self.receive(&a, sigma2) else {
            let f = self.objective(&a, &zero_b, sigma2);
            return SlotOutcome {
                a,
                b: zero_b,
                trace: vec![f],
                degenerate: true,
                inner_capped: 0,
            };
        };
        let mut f = self.objective(&a, &b, sigma2);
        let mut trace = vec![f];
        let mut inner_capped = 0;
        for _ in 0..cfg.outer_iters {
            if f == 0.0 {
                break;
            }
            let mut a_new = a.clone();
            if !self.transmit(&b, &mut a_new, p0, cfg) {
                inner_capped += 1;
            }
            let Some(b_new) = self.receive(&a_new, sigma2) else {
                break;
            };
            let f_new = self.objective(&a_new, &b_new, sigma2);
            if f_new > f {
                break;
            }
            let gain = f - f_new;
            a = a_new;
            b = b_new;
            f = f_new;
            trace.push(f);
            if gain <= cfg.tolerance * (f + gain) {
                break;
            }
        }
        SlotOutcome {
            a,
            b,
            trace,
            degenerate: false,
            inner_capped,
        }
    }
}

fn gain_slices(channels: &[MimoChannel]) -> (Vec<&[C]>, Vec<(usize, usize)>) {
    (
        channels.iter().map(|h| h.gain.as_slice()).collect(),
        channels.iter().map(|h| (h.n_r(), h.n_t())).collect(),
    )
}

/// Expected steering objective summed over slots, reduced in slot order.
pub fn objective(
    set: &BeamformerSet,
    channels: &[MimoChannel],
    frames: &[&[C]],
    targets: &[C],
    noise_var: f64,
) -> Result<f64> {
    check_shapes(channels, frames, targets.len())?;
    check_set(set, channels)?;
    if set.slots() != targets.len() {
        return Err(Error::Shape(format!(
            "{} beamformer slots for {} targets",
            set.slots(),
            targets.len()
        )));
    }
    let (gains, dims) = gain_slices(channels);
    let n_r = channels[0].n_r();
    let per_slot = par::map_range(targets.len(), |i| {
        let slot = Slot {
            gains: &gains,
            dims: &dims,
            n_r,
            data: frames.iter().map(|f| f[i]).collect(),
            target: targets[i],
        };
        slot.objective(&set.slot_transmit(i), &set.slot_receive(i), noise_var)
    });
    Ok(per_slot.iter().sum())
}

/// Per-slot MMSE receive vectors `b_i = r_i conj(a*_i) / (‖r_i‖² + σ²)` for
/// fixed transmit matrices. Returns the matrix and the number of degenerate
/// slots, whose receive vector is zero.
pub fn closed_form_receive(
    transmit: &[CMatrix],
    channels: &[MimoChannel],
    frames: &[&[C]],
    targets: &[C],
    noise_var: f64,
) -> Result<(CMatrix, usize)> {
    let w = targets.len();
    check_shapes(channels, frames, w)?;
    let n_r = channels[0].n_r();
    let probe = BeamformerSet {
        transmit: transmit.to_vec(),
        receive: CMatrix::zeros(n_r, w),
    };
    check_set(&probe, channels)?;
    let (gains, dims) = gain_slices(channels);
    let cols = par::map_range(w, |i| {
        let slot = Slot {
            gains: &gains,
            dims: &dims,
            n_r,
            data: frames.iter().map(|f| f[i]).collect(),
            target: targets[i],
        };
        slot.receive(&probe.slot_transmit(i), noise_var)
    });
    let mut receive = CMatrix::zeros(n_r, w);
    let mut degenerate = 0;
    for (i, col) in cols.into_iter().enumerate() {
        match col {
            Some(b) => receive.column_mut(i).copy_from_slice(&b),
            None => degenerate += 1,
        }
    }
    Ok((receive, degenerate))
}

/// Projected-gradient transmit solve for a fixed receive matrix, started from
/// `init`. Returns the matrices and the number of slots that hit the step
/// budget before converging.
pub fn solve_transmit(
    receive: &CMatrix,
    init: &[CMatrix],
    channels: &[MimoChannel],
    frames: &[&[C]],
    targets: &[C],
    peak_power: f64,
    cfg: &OptimizerConfig,
) -> Result<(Vec<CMatrix>, usize)> {
    cfg.validate()?;
    check_power(peak_power)?;
    let w = targets.len();
    check_shapes(channels, frames, w)?;
    let set = BeamformerSet {
        transmit: init.to_vec(),
        receive: receive.clone(),
    };
    check_set(&set, channels)?;
    let (gains, dims) = gain_slices(channels);
    let n_r = channels[0].n_r();
    let cols = par::map_range(w, |i| {
        let slot = Slot {
            gains: &gains,
            dims: &dims,
            n_r,
            data: frames.iter().map(|f| f[i]).collect(),
            target: targets[i],
        };
        let mut a = set.slot_transmit(i);
        for ak in a.iter_mut() {
            project(ak, peak_power);
        }
        let ok = slot.transmit(&set.slot_receive(i), &mut a, peak_power, cfg);
        (a, ok)
    });
    let mut transmit = set.transmit;
    let mut capped = 0;
    for (i, (a, ok)) in cols.into_iter().enumerate() {
        capped += usize::from(!ok);
        for (m, ak) in transmit.iter_mut().zip(a) {
            m.column_mut(i).copy_from_slice(&ak);
        }
    }
    Ok((transmit, capped))
}

fn check_power(p0: f64) -> Result<()> {
    if !(p0 > 0.0 && p0.is_finite()) {
        return Err(Error::Config(format!("peak power must be positive, got {p0}")));
    }
    Ok(())
}

/// Joint optimisation. `init` supplies the starting transmit matrices; `None`
/// starts from [`gain_alignment`] with equal weights.
pub fn optimize(
    channels: &[MimoChannel],
    frames: &[&[C]],
    targets: &[C],
    peak_power: f64,
    noise_var: f64,
    cfg: &OptimizerConfig,
    init: Option<&BeamformerSet>,
) -> Result<(BeamformerSet, OptimizeReport)> {
    cfg.validate()?;
    check_power(peak_power)?;
    let w = targets.len();
    check_shapes(channels, frames, w)?;
    let start = match init {
        Some(s) => {
            check_set(s, channels)?;
            if s.slots() != w {
                return Err(Error::Shape(format!(
                    "initial beamformers have {} slots, expected {w}",
                    s.slots()
                )));
            }
            s.clone()
        }
        None => {
            let weights = vec![1.0; channels.len()];
            gain_alignment(channels, &weights, peak_power, noise_var, cfg, w)?.0
        }
    };
    let (gains, dims) = gain_slices(channels);
    let n_r = channels[0].n_r();
    let outcomes = par::map_range(w, |i| {
        let slot = Slot {
            gains: &gains,
            dims: &dims,
            n_r,
            data: frames.iter().map(|f| f[i]).collect(),
            target: targets[i],
        };
        slot.solve(start.slot_transmit(i), peak_power, noise_var, cfg)
    });

    let mut set = BeamformerSet::zeros(channels, w);
    let mut report = OptimizeReport::default();
    let longest = outcomes.iter().map(|o| o.trace.len()).max().unwrap_or(1);
    report.objective_trace = vec![0.0; longest];
    for (i, o) in outcomes.into_iter().enumerate() {
        report.degenerate_slots += usize::from(o.degenerate);
        report.inner_capped += o.inner_capped;
        report.total_outer_iterations += o.trace.len() - 1;
        let last = *o.trace.last().expect("trace holds the initial objective");
        for (j, acc) in report.objective_trace.iter_mut().enumerate() {
            *acc += o.trace.get(j).copied().unwrap_or(last);
        }
        for (m, ak) in set.transmit.iter_mut().zip(o.a) {
            m.column_mut(i).copy_from_slice(&ak);
        }
        set.receive.column_mut(i).copy_from_slice(&o.b);
    }
    report.outer_iterations = longest - 1;
    report.all_degenerate = w > 0 && report.degenerate_slots == w;
    if report.all_degenerate {
        set = BeamformerSet::zeros(channels, w);
    }
    Ok((set, report))
}

/// Principal eigenvector of `Σ_k H_k H_kᴴ / ‖H_k‖_F²`.
fn principal_direction(channels: &[MimoChannel]) -> DVector<C> {
    let n_r = channels[0].n_r();
    let mut acc = CMatrix::zeros(n_r, n_r);
    for h in channels {
        let fro = h.gain.norm_squared();
        if fro > 0.0 {
            acc += &h.gain * h.gain.adjoint() / C::from(fro);
        }
    }
    let eig = acc.symmetric_eigen();
    let best = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    eig.eigenvectors.column(best).into_owned()
}

/// Data-independent gain alignment: choose one transmit vector per device and
/// one receive vector so that `b^H H_k a_k ≈ ω_k` with
/// `ω_k = weights_k / Σ weights`, minimising
/// `Σ_k |ω_k − bᴴ H_k a_k|² + σ² ‖b‖²`. The same vectors are used in every
/// slot. Returns the set and the objective trace.
pub fn gain_alignment(
    channels: &[MimoChannel],
    weights: &[f64],
    peak_power: f64,
    noise_var: f64,
    cfg: &OptimizerConfig,
    slots: usize,
) -> Result<(BeamformerSet, Vec<f64>)> {
    check_power(peak_power)?;
    if channels.is_empty() || weights.len() != channels.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} channels",
            weights.len(),
            channels.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("aggregation weights must be non-negative with a positive sum".into()));
    }
    let omega: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let n_r = channels[0].n_r();

    // Equal-gain start: every device reaches the common direction with a gain
    // proportional to its weight, limited by the weakest device.
    let b0 = principal_direction(channels);
    let reach: Vec<(DVector<C>, f64)> = channels
        .iter()
        .map(|h| {
            let c = h.gain.adjoint() * &b0;
            let n = c.norm();
            (c, n)
        })
        .collect();
    let eta = reach
        .iter()
        .zip(&omega)
        .filter(|((_, n), w)| *n > 0.0 && **w > 0.0)
        .map(|((_, n), w)| peak_power.sqrt() * n / w)
        .fold(f64::INFINITY, f64::min);
    let mut a: Vec<DVector<C>> = reach
        .iter()
        .zip(&omega)
        .map(|((c, n), w)| {
            if *n > 0.0 && eta.is_finite() {
                c * C::from(eta * w / (n * n))
            } else {
                DVector::zeros(c.len())
            }
        })
        .collect();
    let mut b = if eta.is_finite() && eta > 0.0 {
        &b0 / C::from(eta)
    } else {
        DVector::zeros(n_r)
    };

    let cost = |a: &[DVector<C>], b: &DVector<C>| -> f64 {
        channels
            .iter()
            .zip(a)
            .zip(&omega)
            .map(|((h, ak), w)| (C::from(*w) - b.dotc(&(&h.gain * ak))).norm_sqr())
            .sum::<f64>()
            + noise_var * b.norm_squared()
    };

    let mut f = cost(&a, &b);
    let mut trace = vec![f];
    for _ in 0..cfg.outer_iters {
        // Receive: regularised least squares over the effective channels.
        let eff: Vec<DVector<C>> = channels.iter().zip(&a).map(|(h, ak)| &h.gain * ak).collect();
        let mut gram = CMatrix::identity(n_r, n_r) * C::from(noise_var);
        let mut rhs = DVector::<C>::zeros(n_r);
        for (e, w) in eff.iter().zip(&omega) {
            gram += e * e.adjoint();
            rhs += e * C::from(*w);
        }
        let b_new = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match gram.pseudo_inverse(1e-300) {
                Ok(p) => p * rhs,
                Err(_) => break,
            },
        };
        // Transmit: per device, the minimum-norm gain match clipped to the ball.
        let a_new: Vec<DVector<C>> = channels
            .iter()
            .zip(&omega)
            .map(|(h, w)| {
                let c = h.gain.adjoint() * &b_new;
                let n2 = c.norm_squared();
                if n2 == 0.0 {
                    return DVector::zeros(c.len());
                }
                let mut v: Vec<C> = (c * C::from(w / n2)).iter().copied().collect();
                project(&mut v, peak_power);
                DVector::from_vec(v)
            })
            .collect();
        let f_new = cost(&a_new, &b_new);
        if !(f_new <= f) {
            break;
        }
        let gain = f - f_new;
        a = a_new;
        b = b_new;
        f = f_new;
        trace.push(f);
        if gain <= cfg.tolerance * (f + gain) {
            break;
        }
    }

    let transmit = a
        .iter()
        .map(|ak| CMatrix::from_fn(ak.len(), slots, |r, _| ak[r]))
        .collect();
    let receive = CMatrix::from_fn(n_r, slots, |r, _| b[r]);
    Ok((BeamformerSet { transmit, receive }, trace))
}

//! MIMO fading channels, the superposed multiple-access uplink and receive
//! combining, evaluated one symbol slot at a time.
//!
//! Slot `i` of device `k` uses transmit vector `a_{k,i}` (column `i` of
//! `A_k`) to carry the scalar symbol `ŵ_{k,i}`; the access point combines
//! slot `i` with receive vector `b_i` (column `i` of `B`).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

pub type CMatrix = DMatrix<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum FadingModel {
    #[default]
    Rayleigh,
    /// `k_factor` is the line-of-sight to scattered power ratio. Infinity
    /// gives a pure line-of-sight channel.
    Rician { k_factor: f64 },
}


#[derive(Debug, Clone, PartialEq)]
pub struct MimoChannel {
    /// `N_r × N_t` complex gains, pathloss included.
    pub gain: CMatrix,
    pub model: FadingModel,
    pub distance_m: f64,
    pub pathloss_exponent: f64,
}

impl MimoChannel {
    pub fn from_matrix(gain: CMatrix) -> Self {
        Self {
            gain,
            model: FadingModel::Rayleigh,
            distance_m: 1.0,
            pathloss_exponent: 0.0,
        }
    }

    pub fn n_r(&self) -> usize {
        self.gain.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.gain.ncols()
    }
}

/// Circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian(rng: &mut SimRng, var: f64) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

fn check_geometry(distance: f64, beta: f64) -> Result<()> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::Config(format!("distance must be positive, got {distance}")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!(
            "pathloss exponent must be non-negative, got {beta}"
        )));
    }
    Ok(())
}

/// Uniform-linear-array line-of-sight response between a device at departure
/// angle `aod` and the access point at arrival angle `aoa`, half-wavelength
/// spacing. Every entry has unit modulus.
pub fn los_matrix(n_r: usize, n_t: usize, aoa: f64, aod: f64) -> CMatrix {
    CMatrix::from_fn(n_r, n_t, |r, t| {
        let phase = PI * (r as f64 * aoa.sin() - t as f64 * aod.sin());
        Complex64::from_polar(1.0, phase)
    })
}

/// Draw a channel with the line-of-sight geometry fixed by `(aoa, aod)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_channel_with_geometry(
    model: FadingModel,
    n_r: usize,
    n_t: usize,
    distance: f64,
    beta: f64,
    aoa: f64,
    aod: f64,
    rng: &mut SimRng,
) -> Result<MimoChannel> {
    check_geometry(distance, beta)?;
    let scale = distance.powf(-0.5 * beta);
    let scattered = CMatrix::from_fn(n_r, n_t, |_, _| complex_gaussian(rng, 1.0));
    let small_scale = match model {
        FadingModel::Rayleigh => scattered,
        FadingModel::Rician { k_factor } => {
            if !(k_factor >= 0.0) {
                return Err(Error::Config(format!(
                    "Rician factor must be non-negative, got {k_factor}"
                )));
            }
            let (w_los, w_sc) = if k_factor.is_infinite() {
                (1.0, 0.0)
            } else {
                ((k_factor / (k_factor + 1.0)).sqrt(), (1.0 / (k_factor + 1.0)).sqrt())
            };
            los_matrix(n_r, n_t, aoa, aod) * Complex64::from(w_los)
                + scattered * Complex64::from(w_sc)
        }
    };
    Ok(MimoChannel {
        gain: small_scale * Complex64::from(scale),
        model,
        distance_m: distance,
        pathloss_exponent: beta,
    })
}

/// Draw a channel. Entry power is `distance^(−β)`; for Rician fading the
/// arrival and departure angles are drawn uniformly first.
pub fn sample_channel(
    model: FadingModel,
    n_r: usize,
    n_t: usize,
    distance: f64,
    beta: f64,
    rng: &mut SimRng,
) -> Result<MimoChannel> {
    let aoa = rng.gen_range(-PI / 2.0..PI / 2.0);
    let aod = rng.gen_range(-PI / 2.0..PI / 2.0);
    sample_channel_with_geometry(model, n_r, n_t, distance, beta, aoa, aod, rng)
}

/// Device distances uniform over the annulus `min_radius ≤ d ≤ radius`.
pub fn place_devices(k: usize, radius: f64, min_radius: f64, rng: &mut SimRng) -> Vec<f64> {
    let (lo, hi) = (min_radius * min_radius, radius * radius);
    (0..k).map(|_| rng.gen_range(lo..=hi).sqrt()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-antenna noise power σ² in watts.
    pub variance: f64,
}

impl NoiseSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("noise variance must be >= 0, got {variance}")));
        }
        Ok(Self { variance })
    }

    pub fn noiseless() -> Self {
        Self { variance: 0.0 }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn dbw_to_watts(dbw: f64) -> f64 {
    10f64.powf(dbw / 10.0)
}

/// Superposed uplink: for every slot `i`,
/// `y_i = Σ_k H_k a_{k,i} ŵ_{k,i} + n_i`. Returns the `N_r × W` received block.
///
/// `noise` supplies the variance and the stream for this block; `None` means a
/// noiseless channel. When `max_power` is given every transmit column must
/// satisfy `‖a_{k,i}‖² ≤ max_power` (relative slack 1e−9).
pub fn uplink_superpose(
    frames: &[&[Complex64]],
    transmit: &[CMatrix],
    channels: &[MimoChannel],
    noise: Option<(&NoiseSpec, &mut SimRng)>,
    max_power: Option<f64>,
) -> Result<CMatrix> {
    if frames.len() != transmit.len() || frames.len() != channels.len() || frames.is_empty() {
        return Err(Error::Shape(format!(
            "{} frames, {} transmit matrices, {} channels",
            frames.len(),
            transmit.len(),
            channels.len()
        )));
    }
    let w = frames[0].len();
    let n_r = channels[0].n_r();
    let mut y = CMatrix::zeros(n_r, w);
    for (k, ((frame, a), h)) in frames.iter().zip(transmit).zip(channels).enumerate() {
        if frame.len() != w {
            return Err(Error::Shape(format!(
                "frame {k} has {} symbols, expected {w}",
                frame.len()
            )));
        }
        if h.n_r() != n_r || a.nrows() != h.n_t() || a.ncols() != w {
            return Err(Error::Shape(format!(
                "device {k}: channel {}x{}, transmit {}x{}, {w} slots, {n_r} receive antennas",
                h.n_r(),
                h.n_t(),
                a.nrows(),
                a.ncols()
            )));
        }
        if let Some(p0) = max_power {
            for (i, col) in a.column_iter().enumerate() {
                let p = col.norm_squared();
                if p > p0 * (1.0 + 1e-9) {
                    return Err(Error::Config(format!(
                        "device {k} slot {i}: transmit power {p:e} exceeds {p0:e}"
                    )));
                }
            }
        }
        let mut scaled = a.clone();
        for (mut col, &s) in scaled.column_iter_mut().zip(frame.iter()) {
            col *= s;
        }
        y.gemm(Complex64::from(1.0), &h.gain, &scaled, Complex64::from(1.0));
    }
    if let Some((spec, rng)) = noise {
        if spec.variance > 0.0 {
            for z in y.iter_mut() {
                *z += complex_gaussian(rng, spec.variance);
            }
        }
    }
    Ok(y)
}

/// Per-slot combining `ŝ_i = b_iᴴ y_i`.
pub fn receive_combine(received: &CMatrix, receive: &CMatrix) -> Result<Vec<Complex64>> {
    if received.shape() != receive.shape() {
        return Err(Error::Shape(format!(
            "received block {:?} vs receive matrix {:?}",
            received.shape(),
            receive.shape()
        )));
    }
    Ok(received
        .column_iter()
        .zip(receive.column_iter())
        .map(|(y, b)| b.dotc(&y))
        .collect())
}

/// `log₂ det(I + (snr/N_t) H Hᴴ)` in bits per channel use.
pub fn mimo_capacity(h: &CMatrix, snr: f64, n_t: usize) -> f64 {
    debug_assert!(snr >= 0.0);
    if snr <= 0.0 {
        return 0.0;
    }
    let n_r = h.nrows();
    let gram = h * h.adjoint() * Complex64::from(snr / n_t as f64);
    let m = CMatrix::identity(n_r, n_r) + gram;
    let chol = m
        .cholesky()
        .expect("identity plus a Gram matrix is positive definite");
    let l = chol.l();
    2.0 * (0..n_r).map(|i| l[(i, i)].re.ln()).sum::<f64>() / std::f64::consts::LN_2
}

/// Ergodic capacity over `draws` unit-pathloss channel realisations.
pub fn ergodic_capacity(
    model: FadingModel,
    n_r: usize,
    n_t: usize,
    snr: f64,
    draws: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..draws {
        let h = sample_channel(model, n_r, n_t, 1.0, 0.0, rng)?;
        acc += mimo_capacity(&h.gain, snr, n_t);
    }
    Ok(acc / draws.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn mean_entry_power(model: FadingModel, d: f64, beta: f64, draws: usize) -> f64 {
        let mut r = rng(5);
        let mut acc = 0.0;
        for _ in 0..draws {
            let h = sample_channel(model, 2, 2, d, beta, &mut r).unwrap();
            acc += h.gain.iter().map(|z| z.norm_sqr()).sum::<f64>() / 4.0;
        }
        acc / draws as f64
    }

    #[test]
    fn same_seed_same_channel() {
        let a = sample_channel(FadingModel::Rayleigh, 2, 3, 100.0, 2.0, &mut rng(1)).unwrap();
        let b = sample_channel(FadingModel::Rayleigh, 2, 3, 100.0, 2.0, &mut rng(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pathloss_law() {
        let p1 = mean_entry_power(FadingModel::Rayleigh, 10.0, 2.0, 10_000);
        let p2 = mean_entry_power(FadingModel::Rayleigh, 20.0, 2.0, 10_000);
        let ratio = p2 / p1;
        assert!((ratio - 0.25).abs() < 0.25 * 0.05, "ratio {ratio}");
        assert!((p1 - 0.01).abs() < 0.01 * 0.05);
    }

    #[test]
    fn rician_power_split() {
        let k = 10.0;
        let (aoa, aod) = (0.3, -0.7);
        let mut r = rng(9);
        let draws = 10_000;
        let mut mean = CMatrix::zeros(2, 2);
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            let h = sample_channel_with_geometry(
                FadingModel::Rician { k_factor: k },
                2,
                2,
                1.0,
                0.0,
                aoa,
                aod,
                &mut r,
            )
            .unwrap();
            mean += &h.gain;
            samples.push(h.gain);
        }
        mean /= Complex64::from(draws as f64);
        let los_power = mean.iter().map(|z| z.norm_sqr()).sum::<f64>() / 4.0;
        let scattered = samples
            .iter()
            .map(|h| (h - &mean).iter().map(|z| z.norm_sqr()).sum::<f64>() / 4.0)
            .sum::<f64>()
            / draws as f64;
        let ratio = los_power / scattered;
        assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
        let inf = sample_channel(FadingModel::Rician { k_factor: f64::INFINITY }, 2, 2, 1.0, 0.0, &mut r)
            .unwrap();
        assert!(inf.gain.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut r = rng(0);
        assert!(sample_channel(FadingModel::Rayleigh, 1, 1, 10.0, -1.0, &mut r).is_err());
        assert!(sample_channel(FadingModel::Rayleigh, 1, 1, 0.0, 2.0, &mut r).is_err());
    }

    #[test]
    fn identity_channel_passthrough_and_superposition() {
        let h = MimoChannel::from_matrix(CMatrix::identity(1, 1));
        let a = CMatrix::from_element(1, 3, Complex64::from(1.0));
        let w1 = [Complex64::new(1.0, 2.0), Complex64::new(-1.0, 0.5), Complex64::new(0.0, -3.0)];
        let w2 = [Complex64::new(0.5, 0.5), Complex64::new(2.0, 0.0), Complex64::new(1.0, 1.0)];
        let y = uplink_superpose(&[&w1], std::slice::from_ref(&a), std::slice::from_ref(&h), None, Some(1.0)).unwrap();
        assert!(y.iter().zip(&w1).all(|(a, b)| a == b));
        let y = uplink_superpose(&[&w1, &w2], &[a.clone(), a], &[h.clone(), h], None, None).unwrap();
        for i in 0..3 {
            assert_eq!(y[(0, i)], w1[i] + w2[i]);
        }
    }

    #[test]
    fn superposition_is_linear() {
        let mut r = rng(21);
        let chans: Vec<_> = (0..3)
            .map(|_| sample_channel(FadingModel::Rayleigh, 2, 2, 1.0, 0.0, &mut r).unwrap())
            .collect();
        let w = 5;
        let rand_m = |r: &mut SimRng| CMatrix::from_fn(2, w, |_, _| complex_gaussian(r, 1.0));
        let a1: Vec<_> = (0..3).map(|_| rand_m(&mut r)).collect();
        let a2: Vec<_> = (0..3).map(|_| rand_m(&mut r)).collect();
        let f: Vec<Vec<_>> = (0..3).map(|_| (0..w).map(|_| complex_gaussian(&mut r, 1.0)).collect()).collect();
        let fr: Vec<&[Complex64]> = f.iter().map(|v| v.as_slice()).collect();
        let sum: Vec<_> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let y1 = uplink_superpose(&fr, &a1, &chans, None, None).unwrap();
        let y2 = uplink_superpose(&fr, &a2, &chans, None, None).unwrap();
        let y12 = uplink_superpose(&fr, &sum, &chans, None, None).unwrap();
        assert!((&y1 + &y2 - &y12).norm() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let h = MimoChannel::from_matrix(CMatrix::identity(2, 2));
        let a = CMatrix::zeros(3, 1);
        let w = [Complex64::from(1.0)];
        assert!(matches!(
            uplink_superpose(&[&w], &[a], &[h], None, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn power_violation_is_rejected() {
        let h = MimoChannel::from_matrix(CMatrix::identity(1, 1));
        let a = CMatrix::from_element(1, 1, Complex64::from(2.0));
        let w = [Complex64::from(1.0)];
        assert!(uplink_superpose(&[&w], &[a], &[h], None, Some(1.0)).is_err());
    }

    #[test]
    fn noise_variance_matches() {
        let h = MimoChannel::from_matrix(CMatrix::identity(1, 1));
        let w = 100_000;
        let a = CMatrix::zeros(1, w);
        let frame = vec![Complex64::from(0.0); w];
        let spec = NoiseSpec::new(0.37).unwrap();
        let mut r = rng(4);
        let y = uplink_superpose(&[&frame], &[a], &[h], Some((&spec, &mut r)), None).unwrap();
        let mean: Complex64 = y.iter().sum::<Complex64>() / w as f64;
        let var = y.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / w as f64;
        assert!((var / 0.37 - 1.0).abs() < 0.03, "{var}");
        assert!(mean.norm() < 0.01);
    }

    #[test]
    fn combine_examples() {
        let y = CMatrix::from_column_slice(2, 1, &[Complex64::new(3.0, 1.0), Complex64::new(-1.0, 2.0)]);
        let b = &y / Complex64::from(y.norm());
        let s = receive_combine(&y, &b).unwrap();
        assert!((s[0] - Complex64::from(y.norm())).norm() < 1e-12);
        let s = receive_combine(&y, &CMatrix::zeros(2, 1)).unwrap();
        assert_eq!(s[0], Complex64::from(0.0));
        assert!(receive_combine(&y, &CMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn combine_matches_naive_inner_product() {
        let mut r = rng(8);
        let y = CMatrix::from_fn(3, 7, |_, _| complex_gaussian(&mut r, 1.0));
        let b = CMatrix::from_fn(3, 7, |_, _| complex_gaussian(&mut r, 1.0));
        let s = receive_combine(&y, &b).unwrap();
        for i in 0..7 {
            let mut acc = Complex64::from(0.0);
            for n in 0..3 {
                acc += b[(n, i)].conj() * y[(n, i)];
            }
            assert!((acc - s[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn capacity_examples() {
        let h = CMatrix::from_element(1, 1, Complex64::from_polar(1.0, 0.7));
        assert!((mimo_capacity(&h, 1.0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(mimo_capacity(&h, 0.0, 1), 0.0);
        let mut r = rng(2);
        for _ in 0..50 {
            let h = sample_channel(FadingModel::Rayleigh, 2, 2, 1.0, 0.0, &mut r).unwrap();
            let mut prev = 0.0;
            for snr in [0.0, 0.1, 1.0, 10.0, 100.0] {
                let c = mimo_capacity(&h.gain, snr, 2);
                assert!(c >= prev - 1e-12);
                prev = c;
            }
        }
    }
}

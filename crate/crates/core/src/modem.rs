//! Digital pre-processing `l(·)` and post-processing `l⁻¹(·)`.
//!
//! A real parameter is clipped to `[-c, c]`, quantized to an `α`-bit level and
//! the level's bits are split into contiguous groups, one group per symbol,
//! most significant group first. Inside a group the high half of the bits
//! drives the in-phase axis and the low half the quadrature axis. Each axis
//! carries a sorted set of amplitudes spaced by the minimum distance `ξ`
//! (the set `𝓜`), so a constellation with peak power `P0` has its outermost
//! axis points at `±√P0`.
//!
//! Averaging superposed symbols and snapping the average to the nearest axis
//! point (the decision regions) is what the AirComp receiver does; see
//! [`decision_target`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How an axis bit group selects an amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BitMapping {
    /// Amplitude index equals the binary value of the bit group.
    #[default]
    NaturalBinary,
    /// Bit group is a reflected Gray codeword of the amplitude index.
    Gray,
}

/// Minimum Euclidean distance between neighbouring points of a square
/// `M`-QAM constellation whose peak per-axis amplitude is `√P0`.
pub fn min_distance(order: usize, peak_power: f64) -> Result<f64> {
    let side = perfect_square_side(order)
        .ok_or_else(|| Error::Config(format!("modulation order {order} is not a perfect square")))?;
    if side < 2 {
        return Err(Error::Config(format!(
            "modulation order must be at least 4, got {order}"
        )));
    }
    if !(peak_power > 0.0 && peak_power.is_finite()) {
        return Err(Error::Config(format!(
            "peak power must be positive and finite, got {peak_power}"
        )));
    }
    Ok(2.0 * peak_power.sqrt() / (side - 1) as f64)
}

fn perfect_square_side(order: usize) -> Option<usize> {
    let s = (order as f64).sqrt().round() as usize;
    (s * s == order).then_some(s)
}

fn gray_encode(b: u64) -> u64 {
    b ^ (b >> 1)
}

fn gray_decode(mut g: u64) -> u64 {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

/// A rectangular constellation: `side` amplitudes per axis, on one axis
/// (BPSK-style) or on both (QAM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    order: usize,
    side: usize,
    bits_per_axis: u32,
    quadrature: bool,
    min_distance: f64,
    axis_points: Vec<f64>,
    mapping: BitMapping,
    peak_power: f64,
}

impl Constellation {
    /// Square `M`-QAM. `M` must be a power of four.
    pub fn qam(order: usize, peak_power: f64, mapping: BitMapping) -> Result<Self> {
        let xi = min_distance(order, peak_power)?;
        let side = perfect_square_side(order).expect("checked by min_distance");
        if !side.is_power_of_two() {
            return Err(Error::Config(format!(
                "modulation order {order} has {side} points per axis; bit mapping needs a power of two"
            )));
        }
        Ok(Self::build(order, side, true, xi, mapping, peak_power))
    }

    /// Two antipodal points `±√P0` on the in-phase axis.
    pub fn bpsk(peak_power: f64) -> Result<Self> {
        if !(peak_power > 0.0 && peak_power.is_finite()) {
            return Err(Error::Config(format!(
                "peak power must be positive and finite, got {peak_power}"
            )));
        }
        let xi = 2.0 * peak_power.sqrt();
        Ok(Self::build(2, 2, false, xi, BitMapping::NaturalBinary, peak_power))
    }

    fn build(
        order: usize,
        side: usize,
        quadrature: bool,
        min_distance: f64,
        mapping: BitMapping,
        peak_power: f64,
    ) -> Self {
        let amp = peak_power.sqrt();
        let span = (side - 1) as f64;
        let axis_points = (0..side)
            .map(|i| (2 * i) as f64 / span * amp - amp)
            .map(|p| if p.abs() < 1e-15 * amp { 0.0 } else { p })
            .collect::<Vec<_>>();
        let mut c = Self {
            order,
            side,
            bits_per_axis: side.trailing_zeros(),
            quadrature,
            min_distance,
            axis_points,
            mapping,
            peak_power,
        };
        // Outermost points are exactly ±√P0.
        c.axis_points[0] = -amp;
        c.axis_points[side - 1] = amp;
        c
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn is_quadrature(&self) -> bool {
        self.quadrature
    }

    pub fn bits_per_axis(&self) -> u32 {
        self.bits_per_axis
    }

    pub fn bits_per_symbol(&self) -> u32 {
        if self.quadrature {
            2 * self.bits_per_axis
        } else {
            self.bits_per_axis
        }
    }

    pub fn min_distance(&self) -> f64 {
        self.min_distance
    }

    pub fn axis_points(&self) -> &[f64] {
        &self.axis_points
    }

    pub fn mapping(&self) -> BitMapping {
        self.mapping
    }

    pub fn peak_power(&self) -> f64 {
        self.peak_power
    }

    pub fn peak_amplitude(&self) -> f64 {
        self.axis_points[self.side - 1]
    }

    /// Decision on one axis. Returns the index of the axis point whose region
    /// contains `x`, and whether `x` lay beyond the outermost region.
    /// A value exactly on a region boundary goes to the smaller-magnitude point.
    pub fn nearest_axis_index(&self, x: f64) -> (usize, bool) {
        let pts = &self.axis_points;
        let half = 0.5 * self.min_distance;
        let last = self.side - 1;
        if x.is_nan() {
            return (last / 2, true);
        }
        if x <= pts[0] {
            return (0, x < pts[0] - half);
        }
        if x >= pts[last] {
            return (last, x > pts[last] + half);
        }
        let t = (x - pts[0]) / self.min_distance;
        let lo = (t.floor() as usize).min(last - 1);
        let (dl, dh) = (x - pts[lo], pts[lo + 1] - x);
        let idx = if dl < dh {
            lo
        } else if dh < dl {
            lo + 1
        } else if pts[lo].abs() <= pts[lo + 1].abs() {
            lo
        } else {
            lo + 1
        };
        (idx, false)
    }

    /// Snap a complex value to the grid. Returns the grid point and the number
    /// of saturated axes (0, 1 or 2).
    pub fn snap(&self, z: Complex64) -> (Complex64, usize) {
        let (i, si) = self.nearest_axis_index(z.re);
        if self.quadrature {
            let (q, sq) = self.nearest_axis_index(z.im);
            (
                Complex64::new(self.axis_points[i], self.axis_points[q]),
                si as usize + sq as usize,
            )
        } else {
            (Complex64::new(self.axis_points[i], 0.0), si as usize)
        }
    }

    fn axis_index_of_code(&self, code: u64, nbits: u32) -> usize {
        let g = match self.mapping {
            BitMapping::NaturalBinary => code,
            BitMapping::Gray => gray_decode(code),
        };
        (g << (self.bits_per_axis - nbits)) as usize
    }

    fn code_of_axis_index(&self, idx: usize, nbits: u32) -> u64 {
        let shift = self.bits_per_axis - nbits;
        let half = (1u64 << shift) >> 1;
        let g = ((idx as u64 + half) >> shift).min((1u64 << nbits) - 1);
        match self.mapping {
            BitMapping::NaturalBinary => g,
            BitMapping::Gray => gray_encode(g),
        }
    }

    fn encode_group(&self, code: u64, nbits: u32) -> Complex64 {
        if self.quadrature {
            let h = nbits / 2;
            let i = self.axis_index_of_code(code >> h, h);
            let q = self.axis_index_of_code(code & ((1 << h) - 1), h);
            Complex64::new(self.axis_points[i], self.axis_points[q])
        } else {
            Complex64::new(self.axis_points[self.axis_index_of_code(code, nbits)], 0.0)
        }
    }

    /// Inverse of `encode_group` for an on-grid point.
    fn decode_group(&self, z: Complex64, nbits: u32) -> u64 {
        if self.quadrature {
            let h = nbits / 2;
            let (i, _) = self.nearest_axis_index(z.re);
            let (q, _) = self.nearest_axis_index(z.im);
            (self.code_of_axis_index(i, h) << h) | self.code_of_axis_index(q, h)
        } else {
            let (i, _) = self.nearest_axis_index(z.re);
            self.code_of_axis_index(i, nbits)
        }
    }
}

/// Fixed-point quantizer over the symmetric range `[-c, c]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub bits_per_param: u32,
    pub clip_magnitude: f64,
}

/// Bits carried by each of the symbols that encode one parameter, most
/// significant group first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolLayout {
    pub group_bits: Vec<u32>,
}

impl SymbolLayout {
    pub fn symbols_per_param(&self) -> usize {
        self.group_bits.len()
    }
}

impl QuantizerConfig {
    pub fn new(bits_per_param: u32, clip_magnitude: f64) -> Result<Self> {
        let cfg = Self {
            bits_per_param,
            clip_magnitude,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.bits_per_param) {
            return Err(Error::Config(format!(
                "bits per parameter must be in 1..=32, got {}",
                self.bits_per_param
            )));
        }
        if !(self.clip_magnitude > 0.0 && self.clip_magnitude.is_finite()) {
            return Err(Error::Config(format!(
                "clip magnitude must be positive and finite, got {}",
                self.clip_magnitude
            )));
        }
        Ok(())
    }

    pub fn max_level(&self) -> u64 {
        (1u64 << self.bits_per_param) - 1
    }

    /// Value spacing between adjacent levels.
    pub fn step(&self) -> f64 {
        2.0 * self.clip_magnitude / self.max_level() as f64
    }

    pub fn symbols_per_param(&self, constellation: &Constellation) -> usize {
        (self.bits_per_param as usize).div_ceil(constellation.bits_per_symbol() as usize)
    }

    pub fn layout(&self, constellation: &Constellation) -> Result<SymbolLayout> {
        self.validate()?;
        let per_symbol = constellation.bits_per_symbol();
        let mut left = self.bits_per_param;
        let mut group_bits = Vec::new();
        while left > 0 {
            let n = left.min(per_symbol);
            if constellation.is_quadrature() && n % 2 == 1 {
                return Err(Error::Config(format!(
                    "{} bits per parameter leave a {n}-bit symbol that cannot be split evenly across I and Q",
                    self.bits_per_param
                )));
            }
            group_bits.push(n);
            left -= n;
        }
        Ok(SymbolLayout { group_bits })
    }
}

/// Map real values to integer levels in `[0, 2^α − 1]` (round half up).
pub fn quantize(values: &[f64], cfg: &QuantizerConfig) -> Result<Vec<u64>> {
    cfg.validate()?;
    let c = cfg.clip_magnitude;
    let max = cfg.max_level();
    let scale = max as f64 / (2.0 * c);
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            let x = (v.clamp(-c, c) + c) * scale;
            Ok(((x + 0.5).floor() as u64).min(max))
        })
        .collect()
}

pub fn dequantize(levels: &[u64], cfg: &QuantizerConfig) -> Vec<f64> {
    let max = cfg.max_level() as f64;
    let c = cfg.clip_magnitude;
    levels
        .iter()
        .map(|&l| (l as f64 / max) * 2.0 * c - c)
        .collect()
}

/// Symbols emitted by one device in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub symbols: Vec<Complex64>,
    pub source_device: usize,
    pub round: usize,
}

impl SymbolFrame {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

pub fn levels_to_symbols(
    levels: &[u64],
    layout: &SymbolLayout,
    constellation: &Constellation,
) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(levels.len() * layout.symbols_per_param());
    for &level in levels {
        let mut remaining: u32 = layout.group_bits.iter().sum();
        for &n in &layout.group_bits {
            remaining -= n;
            let code = (level >> remaining) & ((1u64 << n) - 1);
            out.push(constellation.encode_group(code, n));
        }
    }
    out
}

/// `l(·)`: quantize then map onto the constellation.
pub fn modulate(
    values: &[f64],
    cfg: &QuantizerConfig,
    constellation: &Constellation,
    source_device: usize,
    round: usize,
) -> Result<SymbolFrame> {
    let layout = cfg.layout(constellation)?;
    let levels = quantize(values, cfg)?;
    Ok(SymbolFrame {
        symbols: levels_to_symbols(&levels, &layout, constellation),
        source_device,
        round,
    })
}

/// Grid points the superposed average should land on, one per symbol slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTarget {
    pub points: Vec<Complex64>,
    /// Axes whose average fell outside the outermost decision region.
    pub saturated: usize,
}

/// Target constellation points for a superposition: per slot and per axis, the
/// point of `𝓜` whose decision region contains `symbol_sums[i] / total_count`.
pub fn decision_target(
    symbol_sums: &[Complex64],
    total_count: f64,
    constellation: &Constellation,
) -> Result<DecisionTarget> {
    if !(total_count > 0.0 && total_count.is_finite()) {
        return Err(Error::Config(format!(
            "total sample count must be positive, got {total_count}"
        )));
    }
    let mut saturated = 0;
    let points = symbol_sums
        .iter()
        .map(|&s| {
            let (p, sat) = constellation.snap(s / total_count);
            saturated += sat;
            p
        })
        .collect();
    Ok(DecisionTarget { points, saturated })
}

/// Output of `l⁻¹(·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Demapped {
    pub values: Vec<f64>,
    pub levels: Vec<u64>,
    /// Symbols that were not on the grid and had to be snapped first.
    pub off_grid: usize,
    /// Axes that fell outside the outermost decision region while snapping.
    pub saturated: usize,
}

/// `l⁻¹(·)`: snap to the grid, read the bits back and dequantize.
pub fn demap(
    points: &[Complex64],
    cfg: &QuantizerConfig,
    constellation: &Constellation,
) -> Result<Demapped> {
    let layout = cfg.layout(constellation)?;
    let per = layout.symbols_per_param();
    if !points.len().is_multiple_of(per) {
        return Err(Error::Shape(format!(
            "{} symbols is not a multiple of {per} symbols per parameter",
            points.len()
        )));
    }
    let tol = 1e-9 * constellation.min_distance();
    let mut off_grid = 0;
    let mut saturated = 0;
    let levels: Vec<u64> = points
        .chunks(per)
        .map(|group| {
            let mut level = 0u64;
            for (&z, &n) in group.iter().zip(&layout.group_bits) {
                let (p, sat) = constellation.snap(z);
                saturated += sat;
                if (p - z).norm() > tol {
                    off_grid += 1;
                }
                level = (level << n) | constellation.decode_group(p, n);
            }
            level
        })
        .collect();
    Ok(Demapped {
        values: dequantize(&levels, cfg),
        levels,
        off_grid,
        saturated,
    })
}

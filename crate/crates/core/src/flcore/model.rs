//! Classifier architectures over a flat parameter vector.
//!
//! Layouts (row-major blocks, in order):
//! - linear-softmax: `W (N_O × N_I)`, `b (N_O)`
//! - one-hidden MLP: `W1 (H × N_I)`, `b1 (H)`, `W2 (N_O × H)`, `b2 (N_O)`
//! - small CNN: `K (F × C·k·k)`, `kb (F)`, `W (N_O × P·F)`, `b (N_O)` where `P`
//!   is the number of valid output positions and conv features are stored
//!   position-major.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchKind {
    LinearSoftmax,
    Mlp { hidden: usize },
    SmallCnn { filters: usize, kernel: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub kind: ArchKind,
    /// Per-sample shape: `[N_I]`, `[H, W]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

/// `C = α·op(A)·op(B) + β·C` with `op(A)` of shape `m × k`, `op(B)` of shape
/// `k × n`; all buffers row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(z: &mut [f64], bias: &[f64]) {
    for row in z.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums(z: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in z.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Softmax cross-entropy over rows of `logits`; overwrites `logits` with
/// `(softmax − onehot)/n` and returns the summed loss.
fn softmax_xent(logits: &mut [f64], labels: &[u8], classes: usize, scale: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks_exact_mut(classes).zip(labels) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        total += s.ln() - (row[y as usize].ln());
        for v in row.iter_mut() {
            *v /= s;
        }
        row[y as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    total
}

struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Rows `[sample][position]`, columns `[channel][dy][dx]`.
    fn im2col(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (p, q) = (self.positions(), self.patch());
        let dim = self.channels * self.height * self.width;
        let mut out = vec![0.0; n * p * q];
        for s in 0..n {
            let img = &x[s * dim..(s + 1) * dim];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = &mut out[((s * p) + oy * self.out_w + ox) * q..][..q];
                    let mut j = 0;
                    for c in 0..self.channels {
                        for dy in 0..self.kernel {
                            let base = c * self.height * self.width + (oy + dy) * self.width + ox;
                            row[j..j + self.kernel].copy_from_slice(&img[base..base + self.kernel]);
                            j += self.kernel;
                        }
                    }
                }
            }
        }
        out
    }
}

impl ModelArch {
    pub fn new(kind: ArchKind, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let arch = Self {
            kind,
            input_shape,
            classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if self.input_dim() == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        match self.kind {
            ArchKind::LinearSoftmax => {}
            ArchKind::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("MLP hidden size must be positive".into()));
                }
            }
            ArchKind::SmallCnn { filters, kernel } => {
                let g = self.conv_geom().ok_or_else(|| {
                    Error::Config(format!(
                        "small CNN needs a 2-D or 3-D input shape at least {kernel} wide, got {:?}",
                        self.input_shape
                    ))
                })?;
                if filters == 0 || kernel == 0 || g.positions() == 0 {
                    return Err(Error::Config("CNN filters and kernel must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn conv_geom(&self) -> Option<ConvGeom> {
        let ArchKind::SmallCnn { kernel, .. } = self.kind else {
            return None;
        };
        let (channels, height, width) = match self.input_shape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => return None,
        };
        if kernel == 0 || kernel > height || kernel > width {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            out_h: height - kernel + 1,
            out_w: width - kernel + 1,
        })
    }

    /// Sizes of the parameter blocks in layout order.
    fn blocks(&self) -> Vec<usize> {
        let (d, c) = (self.input_dim(), self.classes);
        match self.kind {
            ArchKind::LinearSoftmax => vec![c * d, c],
            ArchKind::Mlp { hidden } => vec![hidden * d, hidden, c * hidden, c],
            ArchKind::SmallCnn { filters, .. } => {
                let g = self.conv_geom().expect("validated geometry");
                vec![filters * g.patch(), filters, c * g.positions() * filters, c]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().sum()
    }

    /// Multiply-accumulates of one forward pass for one sample.
    pub fn op_count(&self) -> u128 {
        let (d, c) = (self.input_dim() as u128, self.classes as u128);
        match self.kind {
            ArchKind::LinearSoftmax => c * d,
            ArchKind::Mlp { hidden } => hidden as u128 * (d + c),
            ArchKind::SmallCnn { filters, .. } => {
                let g = self.conv_geom().expect("validated geometry");
                let feat = (g.positions() * filters) as u128;
                feat * g.patch() as u128 + c * feat
            }
        }
    }

    /// Coordinates of the final fully-connected layer (weights and bias).
    pub fn last_layer(&self) -> Range<usize> {
        let b = self.blocks();
        let n = b.len();
        let start: usize = b[..n - 2].iter().sum();
        start..start + b[n - 2] + b[n - 1]
    }

    /// Convolution kernel coordinates, if any.
    pub fn kernel_coords(&self) -> Option<Range<usize>> {
        match self.kind {
            ArchKind::SmallCnn { .. } => {
                let b = self.blocks();
                Some(0..b[0] + b[1])
            }
            _ => None,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut SimRng) -> Vec<f64> {
        let (d, c) = (self.input_dim(), self.classes);
        let fans: Vec<(usize, usize)> = match self.kind {
            ArchKind::LinearSoftmax => vec![(d, c)],
            ArchKind::Mlp { hidden } => vec![(d, hidden), (hidden, c)],
            ArchKind::SmallCnn { filters, kernel } => {
                let g = self.conv_geom().expect("validated geometry");
                let ch = g.channels;
                vec![
                    (ch * kernel * kernel, filters * kernel * kernel),
                    (g.positions() * filters, c),
                ]
            }
        };
        let blocks = self.blocks();
        let mut out = Vec::with_capacity(self.param_count());
        for (i, &len) in blocks.iter().enumerate() {
            if i % 2 == 0 {
                let (fi, fo) = fans[i / 2];
                let lim = (6.0 / (fi + fo) as f64).sqrt();
                out.extend((0..len).map(|_| rng.gen_range(-lim..=lim)));
            } else {
                out.extend(std::iter::repeat_n(0.0, len));
            }
        }
        out
    }

    fn split<'a>(&self, params: &'a [f64]) -> Vec<&'a [f64]> {
        let mut rest = params;
        self.blocks()
            .into_iter()
            .map(|len| {
                let (a, b) = rest.split_at(len);
                rest = b;
                a
            })
            .collect()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Logits, `n × N_O` row-major.
    pub fn logits(&self, params: &[f64], x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_params(params)?;
        Ok(self.forward(params, x, n).logits)
    }

    fn forward(&self, params: &[f64], x: &[f64], n: usize) -> Forward {
        let (d, c) = (self.input_dim(), self.classes);
        let p = self.split(params);
        let mut logits = vec![0.0; n * c];
        match self.kind {
            ArchKind::LinearSoftmax => {
                gemm(n, d, c, x, false, p[0], true, 0.0, &mut logits);
                add_bias(&mut logits, p[1]);
                Forward { logits, hidden: Vec::new(), cols: Vec::new() }
            }
            ArchKind::Mlp { hidden } => {
                let mut h = vec![0.0; n * hidden];
                gemm(n, d, hidden, x, false, p[0], true, 0.0, &mut h);
                add_bias(&mut h, p[1]);
                h.iter_mut().for_each(|v| *v = v.max(0.0));
                gemm(n, hidden, c, &h, false, p[2], true, 0.0, &mut logits);
                add_bias(&mut logits, p[3]);
                Forward { logits, hidden: h, cols: Vec::new() }
            }
            ArchKind::SmallCnn { filters, .. } => {
                let g = self.conv_geom().expect("validated geometry");
                let cols = g.im2col(x, n);
                let rows = n * g.positions();
                let mut h = vec![0.0; rows * filters];
                gemm(rows, g.patch(), filters, &cols, false, p[0], true, 0.0, &mut h);
                add_bias(&mut h, p[1]);
                h.iter_mut().for_each(|v| *v = v.max(0.0));
                let feat = g.positions() * filters;
                gemm(n, feat, c, &h, false, p[2], true, 0.0, &mut logits);
                add_bias(&mut logits, p[3]);
                Forward { logits, hidden: h, cols }
            }
        }
    }

    /// Mean cross-entropy plus `½·l2·‖θ‖²`, and its gradient.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x: &[f64],
        labels: &[u8],
        l2: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let n = labels.len();
        let (d, c) = (self.input_dim(), self.classes);
        if x.len() != n * d || n == 0 {
            return Err(Error::Shape(format!("{} inputs for {n} labels of dimension {d}", x.len())));
        }
        let p = self.split(params);
        let mut fw = self.forward(params, x, n);
        let loss = softmax_xent(&mut fw.logits, labels, c, 1.0 / n as f64) / n as f64;
        let dz = fw.logits;
        let mut grad = vec![0.0; params.len()];
        let sizes = self.blocks();
        let mut offs = [0usize; 4];
        for i in 1..sizes.len() {
            offs[i] = offs[i - 1] + sizes[i - 1];
        }
        match self.kind {
            ArchKind::LinearSoftmax => {
                gemm(c, n, d, &dz, true, x, false, 0.0, &mut grad[..c * d]);
                col_sums(&dz, c, &mut grad[c * d..]);
            }
            ArchKind::Mlp { hidden } => {
                let (g1, rest) = grad.split_at_mut(offs[1]);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (g2, gb2) = rest.split_at_mut(c * hidden);
                gemm(c, n, hidden, &dz, true, &fw.hidden, false, 0.0, g2);
                col_sums(&dz, c, gb2);
                let mut dh = vec![0.0; n * hidden];
                gemm(n, c, hidden, &dz, false, p[2], false, 0.0, &mut dh);
                for (g, &h) in dh.iter_mut().zip(&fw.hidden) {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                }
                gemm(hidden, n, d, &dh, true, x, false, 0.0, g1);
                col_sums(&dh, hidden, gb1);
            }
            ArchKind::SmallCnn { filters, .. } => {
                let g = self.conv_geom().expect("validated geometry");
                let feat = g.positions() * filters;
                let rows = n * g.positions();
                let (gk, rest) = grad.split_at_mut(offs[1]);
                let (gkb, rest) = rest.split_at_mut(filters);
                let (gw, gb) = rest.split_at_mut(c * feat);
                gemm(c, n, feat, &dz, true, &fw.hidden, false, 0.0, gw);
                col_sums(&dz, c, gb);
                let mut dh = vec![0.0; n * feat];
                gemm(n, c, feat, &dz, false, p[2], false, 0.0, &mut dh);
                for (g, &h) in dh.iter_mut().zip(&fw.hidden) {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                }
                gemm(filters, rows, g.patch(), &dh, true, &fw.cols, false, 0.0, gk);
                col_sums(&dh, filters, gkb);
            }
        }
        let mut total = loss;
        if l2 > 0.0 {
            total += 0.5 * l2 * params.iter().map(|v| v * v).sum::<f64>();
            for (g, v) in grad.iter_mut().zip(params) {
                *g += l2 * v;
            }
        }
        Ok((total, grad))
    }

    /// Mean loss (without regularisation) and correct-prediction count.
    pub fn loss_and_correct(&self, params: &[f64], x: &[f64], labels: &[u8]) -> Result<(f64, usize)> {
        let n = labels.len();
        let mut logits = self.logits(params, x, n)?;
        let c = self.classes;
        let correct = logits
            .chunks_exact(c)
            .zip(labels)
            .filter(|(row, &y)| {
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(i, _)| i);
                best == y as usize
            })
            .count();
        let loss = softmax_xent(&mut logits, labels, c, 1.0) / n.max(1) as f64;
        Ok((loss, correct))
    }
}

struct Forward {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    cols: Vec<f64>,
}

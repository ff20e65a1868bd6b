//! Per-device update predictor: a one-hidden-layer perceptron run at the
//! server, mapping a slice of the global model to that device's predicted
//! update on the same coordinates.
//!
//! `out = W_out σ(W_in g + b_in) + b_out` with `σ(x) = 2/(1+e^{−2x}) − 1`.
//! `W_in` is `D × V′` and `W_out` is `V′ × D`, both row-major.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SimRng;

const MAGIC: &[u8; 4] = b"AFLP";
const VERSION: u32 = 1;

/// `2/(1+e^{−2x}) − 1`, evaluated through `tanh` for accuracy near zero.
pub fn activation(x: f64) -> f64 {
    x.tanh()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorNet {
    v_prime: usize,
    hidden: usize,
    pub input_weights: Vec<f64>,
    pub input_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
    pub learn_rate: f64,
    /// Gradient steps skipped because the gradient was not finite.
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGrad {
    pub input_weights: Vec<f64>,
    pub input_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl PredictorGrad {
    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [
            &self.input_weights,
            &self.input_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

impl PredictorNet {
    pub fn zeros(v_prime: usize, hidden: usize, learn_rate: f64) -> Self {
        Self {
            v_prime,
            hidden,
            input_weights: vec![0.0; hidden * v_prime],
            input_bias: vec![0.0; hidden],
            output_weights: vec![0.0; v_prime * hidden],
            output_bias: vec![0.0; v_prime],
            learn_rate,
            skipped_steps: 0,
        }
    }

    /// Weights uniform in `±√(6/(fan_in+fan_out))`, biases zero.
    pub fn new(v_prime: usize, hidden: usize, learn_rate: f64, rng: &mut SimRng) -> Self {
        let mut net = Self::zeros(v_prime, hidden, learn_rate);
        if v_prime + hidden > 0 {
            let limit = (6.0 / (v_prime + hidden) as f64).sqrt();
            for w in net.input_weights.iter_mut().chain(net.output_weights.iter_mut()) {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        net
    }

    pub fn v_prime(&self) -> usize {
        self.v_prime
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        2 * self.v_prime * self.hidden + self.hidden + self.v_prime
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn op_count(&self) -> u64 {
        2 * self.v_prime as u64 * self.hidden as u64
    }

    fn hidden_state(&self, input: &[f64]) -> Vec<f64> {
        let v = self.v_prime;
        (0..self.hidden)
            .map(|j| activation(dot(&self.input_weights[j * v..(j + 1) * v], input) + self.input_bias[j]))
            .collect()
    }

    fn output(&self, h: &[f64]) -> Vec<f64> {
        if self.hidden == 0 {
            return self.output_bias.clone();
        }
        self.output_weights
            .chunks_exact(self.hidden)
            .zip(&self.output_bias)
            .map(|(row, b)| dot(row, h) + b)
            .collect()
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.v_prime {
            return Err(Error::Shape(format!(
                "{what} has length {len}, predictor expects {}",
                self.v_prime
            )));
        }
        Ok(())
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_len("input", input.len())?;
        Ok(self.output(&self.hidden_state(input)))
    }

    /// Gradient of `½‖target − predict(input)‖²` with respect to every block.
    pub fn local_gradient(&self, input: &[f64], target: &[f64]) -> Result<PredictorGrad> {
        self.check_len("input", input.len())?;
        self.check_len("target", target.len())?;
        let h = self.hidden_state(input);
        let out = self.output(&h);
        // d loss / d out = out − target
        let delta_out: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
        let mut output_weights = vec![0.0; self.v_prime * self.hidden];
        for (row, &d) in output_weights.chunks_exact_mut(self.hidden.max(1)).zip(&delta_out) {
            for (g, &hj) in row.iter_mut().zip(&h) {
                *g = d * hj;
            }
        }
        let mut delta_hidden = vec![0.0; self.hidden];
        if self.hidden > 0 {
            for (row, &d) in self.output_weights.chunks_exact(self.hidden).zip(&delta_out) {
                for (acc, &w) in delta_hidden.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
        }
        for (d, &hj) in delta_hidden.iter_mut().zip(&h) {
            *d *= 1.0 - hj * hj;
        }
        let mut input_weights = vec![0.0; self.hidden * self.v_prime];
        for (row, &d) in input_weights.chunks_exact_mut(self.v_prime.max(1)).zip(&delta_hidden) {
            for (g, &x) in row.iter_mut().zip(input) {
                *g = d * x;
            }
        }
        Ok(PredictorGrad {
            input_weights,
            input_bias: delta_hidden,
            output_weights,
            output_bias: delta_out,
        })
    }

    /// Plain SGD step. A non-finite gradient is skipped and counted; returns
    /// whether the step was applied.
    pub fn apply_gradient(&mut self, grad: &PredictorGrad, learn_rate: f64) -> Result<bool> {
        if grad.input_weights.len() != self.input_weights.len()
            || grad.input_bias.len() != self.input_bias.len()
            || grad.output_weights.len() != self.output_weights.len()
            || grad.output_bias.len() != self.output_bias.len()
        {
            return Err(Error::Shape("gradient does not match predictor shape".into()));
        }
        if !grad.is_finite() {
            self.skipped_steps += 1;
            return Ok(false);
        }
        let step = |p: &mut [f64], g: &[f64]| {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= learn_rate * d;
            }
        };
        step(&mut self.input_weights, &grad.input_weights);
        step(&mut self.input_bias, &grad.input_bias);
        step(&mut self.output_weights, &grad.output_weights);
        step(&mut self.output_bias, &grad.output_bias);
        Ok(true)
    }

    pub fn loss(&self, input: &[f64], target: &[f64]) -> Result<f64> {
        self.check_len("target", target.len())?;
        let out = self.predict(input)?;
        Ok(0.5 * out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>())
    }

    pub fn flatten(&self) -> Vec<f64> {
        [
            self.input_weights.as_slice(),
            &self.input_bias,
            &self.output_weights,
            &self.output_bias,
        ]
        .concat()
    }

    pub fn unflatten(v_prime: usize, hidden: usize, learn_rate: f64, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(v_prime, hidden, learn_rate);
        if flat.len() != net.param_count() {
            return Err(Error::Shape(format!(
                "{} scalars for a predictor with {} parameters",
                flat.len(),
                net.param_count()
            )));
        }
        let (a, rest) = flat.split_at(hidden * v_prime);
        let (b, rest) = rest.split_at(hidden);
        let (c, d) = rest.split_at(v_prime * hidden);
        net.input_weights.copy_from_slice(a);
        net.input_bias.copy_from_slice(b);
        net.output_weights.copy_from_slice(c);
        net.output_bias.copy_from_slice(d);
        Ok(net)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Model coordinates covered by the predictor, with values on them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSlice {
    indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl PredictionSlice {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, model_len: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} indices for {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("slice indices must be sorted and unique".into()));
        }
        if indices.last().is_some_and(|&i| i >= model_len) {
            return Err(Error::Config(format!(
                "slice index out of range for a model of length {model_len}"
            )));
        }
        Ok(Self { indices, values })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Gather `source` at the slice indices.
    pub fn gather(indices: &[usize], source: &[f64]) -> Vec<f64> {
        indices.iter().map(|&i| source[i]).collect()
    }
}

/// Full-length predicted update: slice values on their coordinates, zero
/// elsewhere.
pub fn assemble_full_prediction(slice: &PredictionSlice, model_len: usize) -> Result<Vec<f64>> {
    if slice.indices.last().is_some_and(|&i| i >= model_len) {
        return Err(Error::Shape(format!(
            "slice index out of range for a model of length {model_len}"
        )));
    }
    let mut out = vec![0.0; model_len];
    for (&i, &v) in slice.indices.iter().zip(&slice.values) {
        out[i] = v;
    }
    Ok(out)
}

/// Checkpoint layout, little-endian: magic `AFLP`, version `u32`, then `u64`
/// fields `V′`, `D`, device, round, the learning rate as `f64`, and the
/// flattened parameters as `f64` in block order `W_in, b_in, W_out, b_out`.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    net: &PredictorNet,
    device: u64,
    round: u64,
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [net.v_prime as u64, net.hidden as u64, device, round] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&net.learn_rate.to_le_bytes())?;
    for x in net.flatten() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: PredictorNet,
    pub device: u64,
    pub round: u64,
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut offset = 0u64;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        input.read_exact(buf).map_err(|_| Error::Parse {
            offset,
            msg: format!("truncated checkpoint while reading {what}"),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a predictor checkpoint".into(),
        });
    }
    let mut b4 = [0u8; 4];
    take(&mut b4, "version")?;
    if u32::from_le_bytes(b4) != VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported checkpoint version {}", u32::from_le_bytes(b4)),
        });
    }
    let mut b8 = [0u8; 8];
    let mut header = [0u64; 4];
    for (h, name) in header.iter_mut().zip(["V'", "D", "device", "round"]) {
        take(&mut b8, name)?;
        *h = u64::from_le_bytes(b8);
    }
    take(&mut b8, "learning rate")?;
    let learn_rate = f64::from_le_bytes(b8);
    let [v_prime, hidden, device, round] = header;
    let (v_prime, hidden) = (v_prime as usize, hidden as usize);
    let n = 2 * v_prime * hidden + hidden + v_prime;
    let mut flat = Vec::with_capacity(n);
    for _ in 0..n {
        take(&mut b8, "parameters")?;
        flat.push(f64::from_le_bytes(b8));
    }
    Ok(Checkpoint {
        net: PredictorNet::unflatten(v_prime, hidden, learn_rate, &flat)?,
        device,
        round,
    })
}

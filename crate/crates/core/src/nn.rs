//! Dense layers, ReLU MLPs, embedding tables, Adam and finite-difference
//! gradient checking. Only what the factorized dynamics model and the
//! covariate map need; no general autograd.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradient buffers, one per parameter tensor, in [`Parameterized`] order.
pub type Grads = Vec<Vec<f64>>;

/// Anything exposing its parameters as an ordered list of flat tensors.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero_grads(&self) -> Grads {
        self.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Weights uniform in `±sqrt(1/fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        DenseLayer {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 || weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Shape(format!(
                "dense layer {inputs}->{outputs} with {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    /// `out = W x + b`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        debug_assert_eq!(out.len(), self.outputs);
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = dot(self.row(o), x) + self.bias[o];
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cached activations of one forward pass: the input of every layer plus
/// the final output.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape always holds the input")
    }
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed input {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects input of length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            layer.forward_into(activations.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        let y = activations.last().unwrap().clone();
        Ok((y, Tape { activations }))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            layer.forward_into(&cur, &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = out;
        }
        Ok(cur)
    }

    /// Smallest |pre-activation| over all hidden units for input `x`;
    /// infinite for a network without hidden layers. Finite differences
    /// are unreliable when this is within a few step sizes of zero.
    pub fn relu_margin(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut margin = f64::INFINITY;
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut out = vec![0.0; layer.outputs];
            layer.forward_into(&cur, &mut out);
            margin = out.iter().fold(margin, |m, v| m.min(v.abs()));
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            cur = out;
        }
        Ok(margin)
    }

    /// Hidden representation: every layer but the last, with ReLU.
    pub(crate) fn hidden_into(&self, x: &[f64], scratch: &mut Vec<f64>, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
        for layer in &self.layers[..self.layers.len() - 1] {
            scratch.resize(layer.outputs, 0.0);
            layer.forward_into(out, scratch);
            scratch.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(scratch, out);
        }
    }

    /// Accumulate parameter gradients into `grads` (in [`Parameterized`]
    /// order) and return `dL/dx`.
    pub fn backward_into(&self, tape: &Tape, dy: &[f64], grads: &mut [Vec<f64>]) -> Result<Vec<f64>> {
        let acts = &tape.activations;
        let consistent = acts.len() == self.layers.len() + 1
            && self
                .layers
                .iter()
                .zip(acts.iter())
                .all(|(layer, a)| layer.inputs == a.len())
            && acts.last().map(Vec::len) == Some(self.output_dim());
        if !consistent {
            return Err(Error::Shape("tape does not match this network".into()));
        }
        if dy.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient of length {}, expected {}",
                dy.len(),
                self.output_dim()
            )));
        }
        if grads.len() != 2 * self.layers.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }

        let mut delta = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                // ReLU mask from this layer's activated output.
                for (d, &a) in delta.iter_mut().zip(&acts[i + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &acts[i];
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut rest[0];
            let mut dx = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = layer.row(o);
                let grow = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for j in 0..layer.inputs {
                    grow[j] += d * input[j];
                    dx[j] += d * row[j];
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<(Grads, Vec<f64>)> {
        let mut grads = self.zero_grads();
        let dx = self.backward_into(tape, dy, &mut grads)?;
        Ok((grads, dx))
    }
}

impl Parameterized for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Lookup table equivalent to a bias-free linear layer on a one-hot input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    /// Row-major `rows x dim`.
    pub values: Vec<f64>,
}

impl EmbeddingTable {
    /// Entries uniform in `(-0.1, 0.1)`.
    pub fn new<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let values = (0..rows * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        EmbeddingTable { rows, dim, values }
    }

    pub fn from_values(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 || values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "embedding {rows}x{dim} with {} values",
                values.len()
            )));
        }
        Ok(EmbeddingTable { rows, dim, values })
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if i >= self.rows {
            return Err(Error::InvalidAgent {
                index: i,
                count: self.rows,
            });
        }
        Ok(&self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Grads,
    v: Grads,
    t: u64,
}

impl Adam {
    pub fn new<P: Parameterized + ?Sized>(config: AdamConfig, params: &P) -> Self {
        Adam {
            config,
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        let shapes_match = params.len() == self.m.len()
            && grads.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
        if !shapes_match {
            return Err(Error::Shape("Adam parameter/gradient shapes disagree".into()));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor, index)` of the worst parameter.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the analytic gradient returned by `loss_and_grads` with central
/// finite differences over every parameter. The relative error of a
/// parameter is `|g_analytic - g_fd| / max(1e-8, |g_fd|)`.
pub fn grad_check<M, F>(model: &mut M, loss_and_grads: F, tolerance: f64) -> GradCheckReport
where
    M: Parameterized,
    F: Fn(&M) -> (f64, Grads),
{
    let (_, analytic) = loss_and_grads(model);
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    for (ti, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = model.tensors()[ti][i];
            model.tensors_mut()[ti][i] = orig + FD_STEP;
            let plus = loss_and_grads(model).0;
            model.tensors_mut()[ti][i] = orig - FD_STEP;
            let minus = loss_and_grads(model).0;
            model.tensors_mut()[ti][i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let rel = (analytic[ti][i] - fd).abs() / fd.abs().max(1e-8);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (ti, i);
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst,
        checked,
        tolerance,
        passed: max_rel_err <= tolerance,
    }
}

//! MLP velocity model `v_theta(x, t)`.
//!
//! The input row is `[x_1, .., x_d, t]`; hidden layers apply the configured
//! activation and the output layer is linear. Weights are stored `in x out`
//! so a batch forward pass is `H W + b` on row-major activations.
//!
//! Batched passes are split into fixed-size row chunks that run in parallel
//! and are reduced in chunk order, so results do not depend on the thread
//! count.

mod checkpoint;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, Adam, TrainConfig, TrainReport};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, FlowError, Result};

/// Rows per parallel work unit.
const CHUNK_ROWS: usize = 64;

/// Hidden trunk used by the bimodal experiment: four layers of 128 units.
pub const DEFAULT_HIDDEN: [usize; 4] = [128, 128, 128, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `z * sigmoid(z)`.
    Silu,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    dim: usize,
    activation: Activation,
    layers: Vec<Dense>,
}

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    fn zeros_like(net: &VelocityNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }

    /// Flattened in the same order as [`VelocityNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// A minibatch of `(x0, x1, t)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: Array1<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.is_empty() {
            return Err(FlowError::InvalidParameter("batch is empty".into()));
        }
        check_dim(dim, self.x0.ncols())?;
        check_dim(dim, self.x1.ncols())?;
        check_dim(self.len(), self.x0.nrows())?;
        check_dim(self.len(), self.x1.nrows())?;
        if let Some(t) = self.t.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(FlowError::Domain {
                t: *t,
                domain: "[0, 1)",
            });
        }
        if self.x0.iter().chain(self.x1.iter()).any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("batch samples".into()));
        }
        Ok(())
    }
}

impl VelocityNet {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and biases, drawn layer by layer.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dim, hidden, activation)?;
        for layer in net.layers.iter_mut() {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            for b in layer.bias.iter_mut() {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        if dim == 0 {
            return Err(FlowError::InvalidParameter("dimension must be >= 1".into()));
        }
        if hidden.iter().any(|h| *h == 0) {
            return Err(FlowError::InvalidParameter("hidden widths must be >= 1".into()));
        }
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            dim,
            activation,
            layers,
        })
    }

    /// Rebuilds a network from its layer sizes and flat parameters.
    pub fn from_parts(sizes: &[usize], activation: Activation, params: &[f64]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(FlowError::InvalidParameter(
                "need at least input and output sizes".into(),
            ));
        }
        let dim = *sizes.last().unwrap();
        if sizes[0] != dim + 1 {
            return Err(FlowError::InvalidParameter(format!(
                "input width {} must equal output width {} + 1",
                sizes[0], dim
            )));
        }
        let mut net = Self::zeros(dim, &sizes[1..sizes.len() - 1], activation)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weight.nrows()];
        sizes.extend(self.layers.iter().map(|l| l.bias.len()));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Per layer: weights (row-major, `in x out`), then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FlowError::NonFinite("network parameters".into()));
        }
        let mut it = params.iter();
        for l in self.layers.iter_mut() {
            l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    /// SHA-256 over layer sizes, activation tag and parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.layer_sizes() {
            h.update((s as u64).to_le_bytes());
        }
        h.update([self.activation.tag()]);
        for p in self.params() {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let xs = ArrayView2::from_shape((1, self.dim), x).expect("contiguous row");
        let out = self.forward_batch(xs, ArrayView1::from(&[t]))?;
        Ok(out.row(0).to_vec())
    }

    /// Row-wise `v_theta(x_i, t_i)`.
    pub fn forward_batch(&self, xs: ArrayView2<f64>, ts: ArrayView1<f64>) -> Result<Array2<f64>> {
        check_dim(self.dim, xs.ncols())?;
        check_dim(xs.nrows(), ts.len())?;
        if xs.iter().chain(ts.iter()).any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("network input".into()));
        }
        let n = xs.nrows();
        let chunks: Vec<Array2<f64>> = (0..n.div_ceil(CHUNK_ROWS))
            .into_par_iter()
            .map(|c| {
                let rows = c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n);
                let input = self.input_rows(
                    xs.slice(s![rows.clone(), ..]),
                    ts.slice(s![rows]),
                );
                self.forward_trace(input).output
            })
            .collect();
        let mut out = Array2::zeros((n, self.dim));
        for (c, chunk) in chunks.into_iter().enumerate() {
            let start = c * CHUNK_ROWS;
            out.slice_mut(s![start..start + chunk.nrows(), ..]).assign(&chunk);
        }
        Ok(out)
    }

    /// Same `t` for every row.
    pub fn forward_batch_at(&self, xs: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let ts = Array1::from_elem(xs.nrows(), t);
        self.forward_batch(xs, ts.view())
    }

    fn input_rows(&self, xs: ArrayView2<f64>, ts: ArrayView1<f64>) -> Array2<f64> {
        let mut input = Array2::zeros((xs.nrows(), self.dim + 1));
        input.slice_mut(s![.., ..self.dim]).assign(&xs);
        input.column_mut(self.dim).assign(&ts);
        input
    }

    fn forward_trace(&self, input: Array2<f64>) -> Trace {
        let last = self.layers.len() - 1;
        let mut activations = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = activations[l].dot(&layer.weight);
            z += &layer.bias;
            if l == last {
                return Trace {
                    activations,
                    pre,
                    output: z,
                };
            }
            let h = z.mapv(|v| self.activation.apply(v));
            pre.push(z);
            activations.push(h);
        }
        unreachable!("network has at least one layer")
    }

    /// Loss sum and unscaled gradient sum over one chunk, given `dL/dv = 2 (v - u)`.
    fn chunk_loss_grad(&self, input: Array2<f64>, target: ArrayView2<f64>) -> (f64, Gradients) {
        let trace = self.forward_trace(input);
        let mut g = &trace.output - &target;
        let loss = g.iter().map(|r| r * r).sum::<f64>();
        g *= 2.0;
        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            grads.weights[l] = trace.activations[l].t().dot(&g);
            grads.biases[l] = g.sum_axis(Axis(0));
            if l > 0 {
                let mut back = g.dot(&self.layers[l].weight.t());
                Zip::from(&mut back)
                    .and(&trace.pre[l - 1])
                    .for_each(|b, z| *b *= self.activation.derivative(*z));
                g = back;
            }
        }
        (loss, grads)
    }

    fn update_params(&mut self, delta: impl Fn(usize, &mut f64)) {
        let mut idx = 0;
        for l in self.layers.iter_mut() {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                delta(idx, w);
                idx += 1;
            }
        }
    }
}

struct Trace {
    /// Layer inputs: the network input, then each hidden activation.
    activations: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

/// Flow-matching regression loss and its gradient.
///
/// `loss = mean_i || v_theta(x_t, t) - (x1 - x0) ||^2` with
/// `x_t = t x1 + (1 - t) x0`; on this path the conditional velocity
/// `(x1 - x_t) / (1 - t)` is identically `x1 - x0`.
pub fn loss_and_grad(net: &VelocityNet, batch: &FlowBatch) -> Result<(f64, Gradients)> {
    batch.validate(net.dim)?;
    let n = batch.len();
    let t_col = batch.t.view().insert_axis(Axis(1));
    let xt = &batch.x1 * &t_col + &batch.x0 * &(1.0 - &t_col);
    let target = &batch.x1 - &batch.x0;

    let parts: Vec<(f64, Gradients)> = (0..n.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|c| {
            let rows = c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n);
            let input = net.input_rows(
                xt.slice(s![rows.clone(), ..]),
                batch.t.slice(s![rows.clone()]),
            );
            net.chunk_loss_grad(input, target.slice(s![rows, ..]))
        })
        .collect();

    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / n as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

//! Dense feedforward Q-network with backpropagation.
//!
//! Rectifier hidden layers, linear outputs (action values are unbounded).
//! Training applies the semi-gradient rule on the selected action's output
//! only: squared error on the chosen action, other outputs masked. Plain
//! SGD is the reference optimizer; an adaptive-moment variant is available
//! behind a config switch.
//!
//! Weights serialize to a portable little-endian byte layout (see
//! [`Mlp::to_bytes`]): magic, format version, layer count, dims, then per
//! layer the row-major weight matrix followed by the bias vector, all as
//! 64-bit floats. Round-trips are bit-exact.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::rng::{SimRng, Stream};

const MAGIC: &[u8; 4] = b"MLPW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// Per layer, row-major: weights[l][o * in + i].
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform fan-in initialization: U[-1/sqrt(in), 1/sqrt(in)], zero
    /// biases.
    pub fn init(dims: &[usize], seed: u64, stream_tag: u32) -> Mlp {
        assert!(dims.len() >= 2, "need input and output dims");
        let mut rng = SimRng::new(seed, Stream::WeightInit(stream_tag));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.range_f64(-bound, bound))
                    .collect(),
            );
            biases.push(alloc::vec![0.0; fan_out]);
        }
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    pub fn zeros(dims: &[usize]) -> Mlp {
        let weights = (0..dims.len() - 1)
            .map(|l| alloc::vec![0.0; dims[l] * dims[l + 1]])
            .collect();
        let biases = (0..dims.len() - 1).map(|l| alloc::vec![0.0; dims[l + 1]]).collect();
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Forward pass; pure, never mutates parameters.
    pub fn forward(&self, x: &[f64]) -> CoreResult<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(CoreError::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.forward_cached(x).pop().unwrap())
    }

    /// Activations per layer, input first, output last.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.dims.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let (w, b) = (&self.weights[l], &self.biases[l]);
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let prev = &acts[l];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut z = b[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    z += row[i] * prev[i];
                }
                // Rectifier on hidden layers, identity on the output.
                if l + 1 < n_layers && z < 0.0 {
                    z = 0.0;
                }
                out.push(z);
            }
            acts.push(out);
        }
        acts
    }

    /// Copies all parameters from `src`; the target-network refresh.
    pub fn copy_from(&mut self, src: &Mlp) -> CoreResult<()> {
        if self.dims != src.dims {
            return Err(CoreError::DimMismatch {
                expected: src.dims.len(),
                got: self.dims.len(),
            });
        }
        self.weights.clone_from(&src.weights);
        self.biases.clone_from(&src.biases);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.dims.len() * 4 + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in 0..self.dims.len() - 1 {
            for &w in &self.weights[l] {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for &b in &self.biases[l] {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CoreResult<Mlp> {
        let mut c = Cursor { bytes, offset: 0 };
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CoreError::Decode {
                offset: 0,
                reason: String::from("bad magic, not a weights blob"),
            });
        }
        let version = c.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CoreError::Decode {
                offset: c.offset - 4,
                reason: format!("unsupported format version {version}"),
            });
        }
        let n_dims = c.u32("layer count")? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(CoreError::Decode {
                offset: c.offset - 4,
                reason: format!("implausible layer count {n_dims}"),
            });
        }
        let mut dims = Vec::with_capacity(n_dims);
        for i in 0..n_dims {
            let d = c.u32(&format!("dim {i}"))? as usize;
            if d == 0 {
                return Err(CoreError::Decode {
                    offset: c.offset - 4,
                    reason: format!("dim {i} is zero"),
                });
            }
            dims.push(d);
        }
        let mut net = Mlp::zeros(&dims);
        for l in 0..n_dims - 1 {
            for k in 0..dims[l] * dims[l + 1] {
                net.weights[l][k] = c.f64(&format!("layer {l} weight {k}"))?;
            }
            for k in 0..dims[l + 1] {
                net.biases[l][k] = c.f64(&format!("layer {l} bias {k}"))?;
            }
        }
        if c.offset != bytes.len() {
            return Err(CoreError::Decode {
                offset: c.offset,
                reason: format!("{} trailing bytes", bytes.len() - c.offset),
            });
        }
        Ok(net)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> CoreResult<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(CoreError::Decode {
                offset: self.offset,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> CoreResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> CoreResult<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain per-batch stochastic gradient, the reference rule.
    Sgd,
    /// Adaptive moments.
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> OptimizerState {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One training sample: state, chosen action, regression target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub state: Vec<f64>,
    pub action: usize,
    pub target: f64,
}

/// Gradient of the masked half-squared error, flattened in parameter
/// order (per layer: weights row-major, then biases), averaged over the
/// batch. Returns the gradient and the pre-update mean squared error.
fn masked_gradient(net: &Mlp, batch: &[TrainSample]) -> CoreResult<(Vec<f64>, f64)> {
    let n_layers = net.dims.len() - 1;
    let mut grad = alloc::vec![0.0; net.param_count()];
    let mut mse = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        if !sample.target.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "training target {}",
                sample.target
            )));
        }
        if sample.state.len() != net.input_dim() {
            return Err(CoreError::DimMismatch {
                expected: net.input_dim(),
                got: sample.state.len(),
            });
        }
        if sample.action >= net.output_dim() {
            return Err(CoreError::DimMismatch {
                expected: net.output_dim(),
                got: sample.action,
            });
        }
        let acts = net.forward_cached(&sample.state);
        let q = acts[n_layers][sample.action];
        let err = q - sample.target;
        mse += err * err * scale;

        // Output delta: masked to the chosen action.
        let mut delta = alloc::vec![0.0; net.dims[n_layers]];
        delta[sample.action] = err * scale;
        // Walk layers backward, accumulating into the flat gradient.
        let mut layer_offset: Vec<usize> = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            layer_offset.push(off);
            off += net.dims[l] * net.dims[l + 1] + net.dims[l + 1];
        }
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (net.dims[l], net.dims[l + 1]);
            let base = layer_offset[l];
            let prev = &acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = base + o * fan_in;
                for i in 0..fan_in {
                    grad[row + i] += d * prev[i];
                }
                grad[base + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let w = &net.weights[l];
                let mut prev_delta = alloc::vec![0.0; fan_in];
                for (i, pd) in prev_delta.iter_mut().enumerate() {
                    // Rectifier gate: units at zero pass no gradient.
                    if acts[l][i] > 0.0 {
                        let mut acc = 0.0;
                        for (o, d) in delta.iter().enumerate() {
                            acc += d * w[o * fan_in + i];
                        }
                        *pd = acc;
                    }
                }
                delta = prev_delta;
            }
        }
    }
    Ok((grad, mse))
}

/// One batch update. Returns the mean squared error measured before the
/// parameters moved.
pub fn train_batch(
    net: &mut Mlp,
    opt: &mut OptimizerState,
    batch: &[TrainSample],
) -> CoreResult<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let (grad, mse) = masked_gradient(net, batch)?;
    if !mse.is_finite() {
        return Err(CoreError::NonFinite(String::from("batch loss")));
    }
    apply_gradient(net, opt, &grad);
    Ok(mse)
}

fn apply_gradient(net: &mut Mlp, opt: &mut OptimizerState, grad: &[f64]) {
    let lr = opt.learning_rate;
    match opt.kind {
        OptimizerKind::Sgd => {
            let mut k = 0;
            for_each_param(net, |p| {
                *p -= lr * grad[k];
                k += 1;
            });
        }
        OptimizerKind::Adam => {
            if opt.m.len() != grad.len() {
                opt.m = alloc::vec![0.0; grad.len()];
                opt.v = alloc::vec![0.0; grad.len()];
                opt.step = 0;
            }
            opt.step += 1;
            let b1t = 1.0 - libm::pow(opt.beta1, opt.step as f64);
            let b2t = 1.0 - libm::pow(opt.beta2, opt.step as f64);
            let mut k = 0;
            let (beta1, beta2, eps) = (opt.beta1, opt.beta2, opt.eps);
            let (m, v) = (&mut opt.m, &mut opt.v);
            for_each_param(net, |p| {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / b1t;
                let vhat = v[k] / b2t;
                *p -= lr * mhat / (libm::sqrt(vhat) + eps);
                k += 1;
            });
        }
    }
}

fn for_each_param(net: &mut Mlp, mut f: impl FnMut(&mut f64)) {
    let n_layers = net.dims.len() - 1;
    for l in 0..n_layers {
        for w in &mut net.weights[l] {
            f(w);
        }
        for b in &mut net.biases[l] {
            f(b);
        }
    }
}

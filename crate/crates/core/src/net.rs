//! A small fully connected embedder with hand-written backpropagation.
//!
//! Hidden layers use ReLU; the last layer is linear and, for embedders,
//! followed by L2 normalization `u = v / (||v|| + 1e-12)`. Scalar
//! regressors (body-part scores) skip the normalization.
//!
//! Checkpoints use a small binary layout: magic `LGM1`, `u32` layer count
//! `L`, `L + 1` `u32` layer widths, then for each layer its weights
//! (row-major, `out x in`) followed by its biases, all little-endian `f64`.
//! A JSON sidecar next to the binary records the training configuration
//! and iteration count.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Embedding;

/// Added to the norm before dividing so a zero vector maps to zero.
pub const NORM_EPS: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"LGM1";

/// One affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub normalize_output: bool,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

/// Cached intermediate values from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[l + 1]` the output of
    /// layer `l` after its nonlinearity (the last one is pre-normalization).
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(dims: &[usize], normalize_output: bool, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Mlp {
            layers,
            normalize_output,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, normalize_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Config(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.inputs,
                    layers[i - 1].outputs
                )));
            }
        }
        let net = Mlp {
            layers,
            normalize_output,
        };
        if !net.is_finite() {
            return Err(Error::Config("network contains non-finite parameters".into()));
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Flat parameter view: each layer's weights, then its biases.
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.weights.len() {
                return l.weights[i];
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                return l.biases[i];
            }
            i -= l.biases.len();
        }
        panic!("parameter index out of range")
    }

    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.weights.len() {
                return &mut l.weights[i];
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                return &mut l.biases[i];
            }
            i -= l.biases.len();
        }
        panic!("parameter index out of range")
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(activations.last().unwrap());
            let a = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let raw = activations.last().unwrap();
        let output = if self.normalize_output {
            crate::model::l2_normalize(raw)
        } else {
            raw.clone()
        };
        Ok(Trace {
            activations,
            pre_activations,
            output,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.forward(x).map(Embedding)
    }

    /// Gradients of `sum_b <grad_out[b], f(inputs[b])>` with respect to
    /// every parameter.
    pub fn backward<X: AsRef<[f64]>, G: AsRef<[f64]>>(
        &self,
        inputs: &[X],
        grad_out: &[G],
    ) -> Result<Gradients> {
        if inputs.len() != grad_out.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: grad_out.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        for (x, g) in inputs.iter().zip(grad_out) {
            let trace = self.forward_trace(x.as_ref())?;
            self.accumulate(&trace, g.as_ref(), &mut grads)?;
        }
        Ok(grads)
    }

    /// Adds the gradient contribution of one traced sample to `grads`.
    pub fn accumulate(&self, trace: &Trace, grad_out: &[f64], grads: &mut Gradients) -> Result<()> {
        if grad_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: grad_out.len(),
            });
        }
        let raw = trace.activations.last().unwrap();
        let mut delta: Vec<f64> = if self.normalize_output {
            // d/dv [v / (n + eps)] = I/(n+eps) - v v^T / ((n+eps)^2 n)
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n + NORM_EPS;
            let vg: f64 = raw.iter().zip(grad_out).map(|(v, g)| v * g).sum();
            let coef = if n > 0.0 { vg / (denom * denom * n) } else { 0.0 };
            raw.iter()
                .zip(grad_out)
                .map(|(v, g)| g / denom - v * coef)
                .collect()
        } else {
            grad_out.to_vec()
        };

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.activations[l];
            let g = &mut grads.layers[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if l == 0 {
                break;
            }
            let below = &trace.pre_activations[l - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            for (n, z) in next.iter_mut().zip(below) {
                if *z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
        Ok(())
    }

    /// Smallest |pre-activation| of any hidden ReLU unit over `inputs`.
    pub fn min_hidden_margin<X: AsRef<[f64]>>(&self, inputs: &[X]) -> Result<f64> {
        let mut best = f64::INFINITY;
        for x in inputs {
            let t = self.forward_trace(x.as_ref())?;
            for z in &t.pre_activations[..t.pre_activations.len() - 1] {
                for v in z {
                    best = best.min(v.abs());
                }
            }
        }
        Ok(best)
    }
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    pub fn is_zero(&self) -> bool {
        self.flat().all(|v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.flat().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Plain SGD with a single step-down of the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub lr_after_drop: f64,
    pub drop_iteration: usize,
    pub max_iterations: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.002,
            lr_after_drop: 0.0002,
            drop_iteration: 2000,
            max_iterations: 3000,
        }
    }
}

impl SgdConfig {
    /// Constant learning rate for `iterations` steps.
    pub fn constant(lr: f64, iterations: usize) -> Self {
        SgdConfig {
            learning_rate: lr,
            lr_after_drop: lr,
            drop_iteration: iterations,
            max_iterations: iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.lr_after_drop > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.drop_iteration > self.max_iterations {
            return Err(Error::Config(
                "drop_iteration must not exceed max_iterations".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.drop_iteration {
            self.learning_rate
        } else {
            self.lr_after_drop
        }
    }
}

/// `params <- params - lr(iteration) * grads`. Non-finite gradients abort
/// the step and leave the parameters untouched.
pub fn sgd_step(net: &mut Mlp, grads: &Gradients, cfg: &SgdConfig, iteration: usize) -> Result<()> {
    for (i, g) in grads.layers.iter().enumerate() {
        if !g.weights.iter().chain(&g.biases).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: i });
        }
    }
    let lr = cfg.lr_at(iteration);
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= lr * d;
        }
        for (b, d) in layer.biases.iter_mut().zip(&g.biases) {
            *b -= lr * d;
        }
    }
    Ok(())
}

/// Relative error used by the gradient audit.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients from `loss` against central differences
/// with step `h` and returns the largest relative error over `indices`
/// (every parameter when `None`).
pub fn grad_check<F>(net: &Mlp, loss: F, h: f64, indices: Option<&[usize]>) -> f64
where
    F: Fn(&Mlp) -> (f64, Gradients),
{
    let (_, analytic) = loss(net);
    let flat: Vec<f64> = analytic.flat().collect();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..net.param_count()).collect();
            &all
        }
    };
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe.param(i);
        *probe.param_mut(i) = orig + h;
        let plus = loss(&probe).0;
        *probe.param_mut(i) = orig - h;
        let minus = loss(&probe).0;
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(flat[i], numeric));
    }
    worst
}

/// JSON sidecar stored next to a binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layer_dims: Vec<usize>,
    pub normalize_output: bool,
    pub iteration: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_checkpoint(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.param_count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for d in net.layer_dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for l in &net.layers {
        for v in l.weights.iter().chain(&l.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], normalize_output: bool) -> Result<Mlp> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad("missing LGM1 magic"));
    }
    let mut pos = 4;
    let read_u32 = |pos: &mut usize| -> Result<usize> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated header"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let n_layers = read_u32(&mut pos)?;
    let dims: Vec<usize> = (0..=n_layers)
        .map(|_| read_u32(&mut pos))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let mut layer = Dense::zeros(w[0], w[1]);
        for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            let b = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated body"))?;
            *v = f64::from_le_bytes(b.try_into().unwrap());
            pos += 8;
        }
        layers.push(layer);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Mlp::from_layers(layers, normalize_output)
}

/// Writes the binary checkpoint and its JSON sidecar.
pub fn save_checkpoint(
    net: &Mlp,
    path: &Path,
    iteration: usize,
    config: serde_json::Value,
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&encode_checkpoint(net))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        layer_dims: net.layer_dims(),
        normalize_output: net.normalize_output,
        iteration,
        config,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Loads a checkpoint; the sidecar is required because it carries the
/// output-normalization flag.
pub fn load_checkpoint(path: &Path) -> Result<(Mlp, CheckpointMeta)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let net = decode_checkpoint(&bytes, meta.normalize_output)?;
    if net.layer_dims() != meta.layer_dims {
        return Err(Error::Checkpoint("sidecar dims disagree with binary".into()));
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity2() -> Mlp {
        let layer = Dense {
            inputs: 2,
            outputs: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            biases: vec![0.0, 0.0],
        };
        Mlp::from_layers(vec![layer], true).unwrap()
    }

    #[test]
    fn identity_layer_normalizes() {
        let out = identity2().forward(&[3.0 / 5.0, 4.0 / 5.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
        let out = identity2().forward(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_input_has_no_nan() {
        let out = identity2().forward(&[0.0, 0.0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let n: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[6, 10, 4], true, &mut rng).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e = net.embed(&x).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 5, 2], true, &mut rng).unwrap();
        let g = net
            .backward(&[vec![0.3, -1.0, 2.0]], &[vec![0.0, 0.0]])
            .unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn dead_relu_unit_gets_no_gradient() {
        // Hidden unit 1 has a large negative bias and never fires.
        let l0 = Dense {
            inputs: 2,
            outputs: 2,
            weights: vec![1.0, 0.5, 0.2, -0.3],
            biases: vec![0.1, -100.0],
        };
        let l1 = Dense {
            inputs: 2,
            outputs: 1,
            weights: vec![0.7, 0.9],
            biases: vec![0.0],
        };
        let net = Mlp::from_layers(vec![l0, l1], false).unwrap();
        let g = net.backward(&[vec![1.0, 2.0]], &[vec![1.0]]).unwrap();
        assert_eq!(&g.layers[0].weights[2..4], &[0.0, 0.0]);
        assert_eq!(g.layers[0].biases[1], 0.0);
        assert_eq!(g.layers[1].weights[1], 0.0);
        assert!(g.layers[0].weights[0] != 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = identity2();
        assert!(net.backward(&[vec![1.0, 2.0]], &[vec![1.0]]).is_err());
        assert!(net.backward(&[vec![1.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr_at(0), 0.002);
        assert_eq!(cfg.lr_at(1999), 0.002);
        assert_eq!(cfg.lr_at(2000), 0.0002);
        assert_eq!(cfg.lr_at(2999), 0.0002);
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[3, 4, 2], true, &mut rng).unwrap();
        let before = net.clone();
        sgd_step(&mut net, &Gradients::zeros_like(&before), &SgdConfig::default(), 0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn scalar_quadratic_step() {
        // f(w) = (w x - y)^2 with x = 2, y = 1, w = 3: df/dw = 2 (w x - y) x = 20.
        let layer = Dense {
            inputs: 1,
            outputs: 1,
            weights: vec![3.0],
            biases: vec![0.0],
        };
        let mut net = Mlp::from_layers(vec![layer], false).unwrap();
        let out = net.forward(&[2.0]).unwrap()[0];
        let g = net.backward(&[vec![2.0]], &[vec![2.0 * (out - 1.0)]]).unwrap();
        assert_eq!(g.layers[0].weights[0], 20.0);
        let cfg = SgdConfig::constant(0.01, 10);
        sgd_step(&mut net, &g, &cfg, 0).unwrap();
        assert!((net.layers[0].weights[0] - 2.8).abs() < 1e-15);
        assert!((net.layers[0].biases[0] - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = identity2();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[1] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut net, &g, &SgdConfig::default(), 0),
            Err(Error::NonFiniteGradient { layer: 0 })
        ));
        assert_eq!(net, identity2());
    }

    fn quadratic_loss<'a>(
        inputs: &'a [Vec<f64>],
        targets: &'a [Vec<f64>],
    ) -> impl Fn(&Mlp) -> (f64, Gradients) + 'a {
        move |net: &Mlp| {
            let mut loss = 0.0;
            let mut grads = Vec::new();
            for (x, t) in inputs.iter().zip(targets) {
                let y = net.forward(x).unwrap();
                loss += y.iter().zip(t).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>();
                grads.push(y.iter().zip(t).map(|(a, b)| a - b).collect::<Vec<_>>());
            }
            (loss, net.backward(inputs, &grads).unwrap())
        }
    }

    #[test]
    fn linear_quadratic_grad_check_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[4, 3], false, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let err = grad_check(&net, quadratic_loss(&inputs, &targets), 1e-5, None);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grad_check_ignores_batch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 6, 2], true, &mut rng).unwrap();
        let mut inputs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut targets: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (l1, g1) = quadratic_loss(&inputs, &targets)(&net);
        inputs.reverse();
        targets.reverse();
        let (l2, g2) = quadratic_loss(&inputs, &targets)(&net);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flat().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(grad_check(&net, quadratic_loss(&inputs, &targets), 1e-5, None) < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::new(&[5, 7, 3], true, &mut rng).unwrap();
        let bytes = encode_checkpoint(&net);
        assert_eq!(&bytes[..4], b"LGM1");
        assert_eq!(decode_checkpoint(&bytes, true).unwrap(), net);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], true).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lgm");
        save_checkpoint(&net, &path, 42, serde_json::json!({"a": 1})).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta.iteration, 42);
    }
}

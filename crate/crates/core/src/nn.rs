//! Minimal multilayer perceptron with manual backpropagation.
//!
//! Hidden layers use SiLU activation, the output layer is linear. Parameters
//! live in one flat `Vec<f64>` (per layer: row-major weight matrix, then
//! bias), which lets the classifier loss treat the whole network as its
//! decision vector and keeps optimizers generic.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// d/dz [z * sigmoid(z)] = sigmoid(z) * (1 + z * (1 - sigmoid(z)))
#[inline]
pub fn silu_deriv(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

/// Layer widths of a fully-connected network, e.g. `[2, 16, 16, 2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub widths: Vec<usize>,
}

impl MlpArch {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|w| *w == 0) {
            return Err(Error::config(
                "architecture needs at least input and output widths, all positive",
            ));
        }
        Ok(MlpArch { widths })
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        (0..self.layer_count())
            .map(|l| self.widths[l] * self.widths[l + 1] + self.widths[l + 1])
            .sum()
    }

    /// (weight offset, bias offset, next offset) of layer `l` in the flat vector.
    fn offsets(&self, l: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.widths[k] * self.widths[k + 1] + self.widths[k + 1];
        }
        let w = off;
        let b = off + self.widths[l] * self.widths[l + 1];
        (w, b, b + self.widths[l + 1])
    }

    /// Forward pass recording the activation tape needed for an exact
    /// backward pass.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if params.len() != self.param_count() {
            return Err(Error::config(format!(
                "parameter vector has length {}, architecture needs {}",
                params.len(),
                self.param_count()
            )));
        }
        if input.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has dimension {}, first layer expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let layers = self.layer_count();
        let mut tape = Tape {
            widths: self.widths.clone(),
            fingerprint: fingerprint(params),
            layer_inputs: Vec::with_capacity(layers),
            preactivations: Vec::with_capacity(layers),
        };
        let mut act = input.to_vec();
        for l in 0..layers {
            let (wo, bo, _) = self.offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut z = vec![0.0; n_out];
            for i in 0..n_out {
                let row = &params[wo + i * n_in..wo + (i + 1) * n_in];
                let mut s = params[bo + i];
                for (w, a) in row.iter().zip(&act) {
                    s += w * a;
                }
                z[i] = s;
            }
            tape.layer_inputs.push(act);
            let last = l + 1 == layers;
            act = if last {
                z.clone()
            } else {
                z.iter().map(|&t| silu(t)).collect()
            };
            tape.preactivations.push(z);
        }
        Ok((act, tape))
    }

    /// Reverse-mode gradients of the scalar whose output gradient is given,
    /// with respect to all parameters and the input.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        output_grad: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if tape.widths != self.widths {
            return Err(Error::usage(
                "stale tape: recorded architecture does not match this network",
            ));
        }
        if tape.fingerprint != fingerprint(params) {
            return Err(Error::usage(
                "stale tape: parameters changed since the forward pass",
            ));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::config(format!(
                "output gradient has dimension {}, expected {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let layers = self.layer_count();
        let mut grads = vec![0.0; params.len()];
        let mut delta = output_grad.to_vec();
        for l in (0..layers).rev() {
            let (wo, bo, _) = self.offsets(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            if l + 1 != layers {
                // Pull the delta back through the SiLU of this layer.
                for (d, z) in delta.iter_mut().zip(&tape.preactivations[l]) {
                    *d *= silu_deriv(*z);
                }
            }
            let a = &tape.layer_inputs[l];
            let mut prev = vec![0.0; n_in];
            for i in 0..n_out {
                let di = delta[i];
                grads[bo + i] = di;
                let row = &mut grads[wo + i * n_in..wo + (i + 1) * n_in];
                for j in 0..n_in {
                    row[j] = di * a[j];
                }
                let wrow = &params[wo + i * n_in..wo + (i + 1) * n_in];
                for j in 0..n_in {
                    prev[j] += di * wrow[j];
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }
}

fn fingerprint(params: &[f64]) -> u64 {
    params
        .iter()
        .fold(0u64, |acc, p| acc.rotate_left(1).wrapping_add(p.to_bits()))
}

/// Activation record from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    widths: Vec<usize>,
    fingerprint: u64,
    layer_inputs: Vec<Vec<f64>>,
    preactivations: Vec<Vec<f64>>,
}

/// An MLP owning its parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub arch: MlpArch,
    pub params: Vec<f64>,
}

impl Mlp {
    /// He-style fan-in uniform initialization of all layers, zero biases.
    pub fn new_seeded(arch: MlpArch, rng: &mut Rng) -> Mlp {
        let mut params = vec![0.0; arch.param_count()];
        for l in 0..arch.layer_count() {
            let (wo, bo, _) = arch.offsets(l);
            let fan_in = arch.widths[l];
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in params[wo..bo].iter_mut() {
                *w = rng.uniform_in(-limit, limit);
            }
        }
        Mlp { arch, params }
    }

    /// Zeroes the last layer's weights and bias, so the network maps every
    /// input to the zero vector.
    pub fn zero_final_layer(&mut self) {
        let l = self.arch.layer_count() - 1;
        let (wo, _, end) = self.arch.offsets(l);
        for p in self.params[wo..end].iter_mut() {
            *p = 0.0;
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.arch.forward(&self.params, input)
    }

    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.arch.backward(&self.params, tape, output_grad)
    }

    /// Flat JSON object mapping layer names to row-major arrays,
    /// e.g. `layer0.weight`, `layer0.bias`.
    pub fn to_named_params(&self) -> Map<String, Value> {
        let mut map = Map::new();
        for l in 0..self.arch.layer_count() {
            let (wo, bo, end) = self.arch.offsets(l);
            map.insert(
                format!("layer{l}.weight"),
                Value::from(self.params[wo..bo].to_vec()),
            );
            map.insert(
                format!("layer{l}.bias"),
                Value::from(self.params[bo..end].to_vec()),
            );
        }
        map
    }

    pub fn from_named_params(arch: MlpArch, map: &Map<String, Value>) -> Result<Mlp> {
        let mut params = vec![0.0; arch.param_count()];
        for l in 0..arch.layer_count() {
            let (wo, bo, end) = arch.offsets(l);
            read_array(map, &format!("layer{l}.weight"), &mut params[wo..bo])?;
            read_array(map, &format!("layer{l}.bias"), &mut params[bo..end])?;
        }
        Ok(Mlp { arch, params })
    }
}

fn read_array(map: &Map<String, Value>, key: &str, out: &mut [f64]) -> Result<()> {
    let arr = map
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::config(format!("checkpoint missing array '{key}'")))?;
    if arr.len() != out.len() {
        return Err(Error::config(format!(
            "checkpoint array '{key}' has length {}, expected {}",
            arr.len(),
            out.len()
        )));
    }
    for (slot, v) in out.iter_mut().zip(arr) {
        *slot = v
            .as_f64()
            .ok_or_else(|| Error::config(format!("non-numeric entry in '{key}'")))?;
    }
    Ok(())
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub kind: OptimKind,
    pub learning_rate: f64,
    /// Decoupled weight decay; applied directly to parameters, not gradients.
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64, weight_decay: f64, dim: usize) -> Self {
        OptimState {
            kind: OptimKind::SgdMomentum { momentum },
            learning_rate,
            weight_decay,
            step_count: 0,
            m: vec![0.0; dim],
            v: Vec::new(),
        }
    }

    /// Adam with the conventional beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn adam(learning_rate: f64, weight_decay: f64, dim: usize) -> Self {
        OptimState {
            kind: OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            weight_decay,
            step_count: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer buffers sized {}, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimKind::SgdMomentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                    if self.weight_decay != 0.0 {
                        *p -= lr * self.weight_decay * *p;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                    if self.weight_decay != 0.0 {
                        *p -= lr * self.weight_decay * *p;
                    }
                }
            }
        }
        Ok(())
    }
}

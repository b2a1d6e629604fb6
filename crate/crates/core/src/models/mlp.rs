use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply_value(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => m.map(f64::tanh),
            Activation::Relu => m.map(|v| v.max(0.0)),
            Activation::Identity => m.clone(),
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Uniform Glorot initialization: `U[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..=a))
}

/// Fully connected layer `y = x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Stack of linear layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    dims: Vec<usize>,
    layers: Vec<Linear>,
    activations: Vec<Activation>,
}

impl MlpNetwork {
    /// `dims` lists layer widths input first; `activations` has one entry
    /// per layer (`dims.len() - 1`).
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        assert_eq!(activations.len(), dims.len() - 1);
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: glorot_uniform(rng, w[0], w[1]),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            layers,
            activations: activations.to_vec(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Zeroes the last layer, so the network outputs zeros everywhere.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.layer{i}.weight"), &l.weight),
                    (format!("{prefix}.layer{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Forward pass outside any tape. Returns every layer's post-activation
    /// output; the last entry is the network output.
    pub fn forward_layers(&self, x: &Matrix) -> Result<Vec<Matrix>, ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::InputWidth {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut z = h.matmul(&layer.weight)?;
            for r in 0..z.rows() {
                for (o, b) in z.row_mut(r).iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            h = act.apply_value(&z);
            outs.push(h.clone());
        }
        Ok(outs)
    }

    pub fn forward_value(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        Ok(self.forward_layers(x)?.pop().expect("at least one layer"))
    }

    /// Records the parameters on `tape`: as leaves when `trainable`, as
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut record = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (record(&l.weight), record(&l.bias)))
            .collect();
        BoundMlp {
            input_dim: self.input_dim(),
            layers,
            activations: self.activations.clone(),
        }
    }
}

/// An [`MlpNetwork`]'s parameters as tape handles.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    input_dim: usize,
    layers: Vec<(Var, Var)>,
    activations: Vec<Activation>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        self.forward_layers(tape, x).map(|mut v| v.pop().expect("at least one layer"))
    }

    /// Post-activation output of every layer.
    pub fn forward_layers(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>, ModelError> {
        let width = tape.value(x).cols();
        if width != self.input_dim {
            return Err(ModelError::InputWidth {
                expected: self.input_dim,
                found: width,
            });
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (&(w, b), act) in self.layers.iter().zip(&self.activations) {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = act.apply(tape, z);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Parameter handles in [`MlpNetwork::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

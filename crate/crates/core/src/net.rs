//! Fully connected tanh feature network `φ(x; w)`.
//!
//! Every layer, including the last, computes `tanh(X W + b)`, so features are
//! bounded in (−1, 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl NetConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, feature_dim: usize) -> Result<Self> {
        let cfg = NetConfig {
            input_dim,
            hidden_dims,
            feature_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0)
        {
            return Err(Error::InvalidArgument(format!(
                "network dimensions must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    /// `1 × fan_out`
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetWeights {
    pub layers: Vec<Layer>,
}

/// Glorot-uniform half-width for a layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl NetWeights {
    /// Weights i.i.d. uniform within the Glorot bound, biases zero.
    pub fn init(config: &NetConfig, rng: &mut impl Rng) -> Self {
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = glorot_bound(fan_in, fan_out);
                Layer {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        NetWeights { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Checks the weights against a configuration.
    pub fn check(&self, config: &NetConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "network has {} layers, config expects {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, (layer, (fan_in, fan_out))) in self.layers.iter().zip(shapes).enumerate() {
            if layer.weight.shape() != (fan_in, fan_out) || layer.bias.shape() != (1, fan_out) {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?} bias {:?}, expected ({fan_in}, {fan_out})",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::InvalidArgument(format!("layer {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.as_slice().len())
            .sum()
    }

    /// Features for a `batch × n_x` input.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            let b = layer.bias.as_slice();
            for r in 0..z.rows() {
                for (v, bb) in z.row_mut(r).iter_mut().zip(b) {
                    *v = (*v + bb).tanh();
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Features for a single input vector.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x))?.into_vec())
    }

    /// Records every weight and bias as a tape leaf, in layer order
    /// `[W₁, b₁, W₂, b₂, …]`.
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .map(|m| tape.leaf(m))
            .collect()
    }

    /// Flat list of parameter matrices in the same order as [`to_tape`](Self::to_tape).
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Forward pass on a tape given leaves from [`NetWeights::to_tape`].
pub fn forward_on_tape(tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
    if !params.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(
            "network parameters must come in weight/bias pairs".into(),
        ));
    }
    let mut h = x;
    for pair in params.chunks_exact(2) {
        let z = tape.matmul(h, pair[0])?;
        let z = tape.add_row(z, pair[1])?;
        h = tape.tanh(z);
    }
    Ok(h)
}

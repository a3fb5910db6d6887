//! Multilayer perceptron producing a single logit.
//!
//! Parameters are stored flat, layer by layer: the weight matrix in row-major
//! `[out][in]` order followed by the bias vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer sizes must contain an input size and end with a single output, got {0:?}")]
    InvalidSizes(Vec<usize>),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Smooth hidden-layer activations. ReLU is deliberately absent: the training
/// objective differentiates input-gradients, and ReLU's second derivative
/// vanishes almost everywhere.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => autodiff::sigmoid(z),
            Activation::Softplus => autodiff::softplus(z),
        }
    }

    fn apply_graph(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::Softplus => tape.softplus(z),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub seed: u64,
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<(), ModelError> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) || *layer_sizes.last().unwrap() != 1 {
        return Err(ModelError::InvalidSizes(layer_sizes.to_vec()));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(
    layer_sizes: &[usize],
    activation: Activation,
    seed: u64,
) -> Result<MlpParams, ModelError> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)));
        weights.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        activation,
        weights,
        seed,
    })
}

impl MlpParams {
    pub fn from_weights(
        layer_sizes: &[usize],
        activation: Activation,
        weights: Vec<f64>,
    ) -> Result<Self, ModelError> {
        validate_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if weights.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: weights.len(),
            });
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            seed: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    /// `(weights, biases, fan_in, fan_out)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (&[f64], &[f64], usize, usize)> {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wlen = fan_in * fan_out;
            let weights = &self.weights[offset..offset + wlen];
            let biases = &self.weights[offset + wlen..offset + wlen + fan_out];
            offset += wlen + fan_out;
            (weights, biases, fan_in, fan_out)
        })
    }

    fn check_dim(&self, got: usize) -> Result<(), ModelError> {
        if got != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x.len())?;
        let last = self.layer_sizes.len() - 2;
        let mut current = x.to_vec();
        for (l, (w, b, fan_in, fan_out)) in self.layers().enumerate() {
            let next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = row
                        .iter()
                        .zip(&current)
                        .fold(0.0, |acc, (a, c)| acc + a * c)
                        + b[o];
                    if l == last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            current = next;
        }
        Ok(current[0])
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(autodiff::sigmoid(self.logit(x)?))
    }

    pub fn predict(&self, x: &[f64], threshold: f64) -> Result<u8, ModelError> {
        Ok(predict_from_logit(self.logit(x)?, threshold))
    }

    /// Registers every weight as a parameter leaf of `tape`.
    pub fn param_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|&w| tape.param(w)).collect()
    }

    /// Builds the forward pass on `tape`. `params` must come from
    /// [`MlpParams::param_vars`] (or any vars in the same flat layout).
    pub fn logit_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: &[Var],
    ) -> Result<Var, ModelError> {
        let u = self.first_layer_graph(tape, params, x)?;
        Ok(self.head_graph(tape, params, &u))
    }

    fn check_params(&self, params: &[Var]) -> Result<(), ModelError> {
        if params.len() != self.weights.len() {
            return Err(ModelError::ParamCount {
                expected: self.weights.len(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations `W1 x + c1` of the first layer.
    pub fn first_layer_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        self.check_dim(x.len())?;
        self.check_params(params)?;
        Ok(self.affine_graph(
            tape,
            params,
            0,
            self.layer_sizes[0],
            self.layer_sizes[1],
            x,
            true,
        ))
    }

    /// `W1 v` without the bias.
    pub fn first_layer_linear_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        v: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        self.check_dim(v.len())?;
        self.check_params(params)?;
        Ok(self.affine_graph(
            tape,
            params,
            0,
            self.layer_sizes[0],
            self.layer_sizes[1],
            v,
            false,
        ))
    }

    /// `W1^T g` for `g` the width of the first layer.
    pub fn first_layer_transpose_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        g: &[Var],
    ) -> Vec<Var> {
        let (fan_in, fan_out) = (self.layer_sizes[0], self.layer_sizes[1]);
        assert_eq!(
            g.len(),
            fan_out,
            "first_layer_transpose_graph: width mismatch"
        );
        let mut terms = Vec::with_capacity(fan_out);
        (0..fan_in)
            .map(|j| {
                terms.clear();
                for (o, &go) in g.iter().enumerate() {
                    let m = tape.mul(params[o * fan_in + j], go);
                    terms.push(m);
                }
                tape.sum(&terms)
            })
            .collect()
    }

    /// The network above the first layer's pre-activations `u`; for a
    /// single-layer model `u` is already the logit.
    ///
    /// # Panics
    /// If `u` does not match the first layer's width.
    pub fn head_graph(&self, tape: &mut Tape, params: &[Var], u: &[Var]) -> Var {
        assert_eq!(u.len(), self.layer_sizes[1], "head_graph: width mismatch");
        let mut current = u.to_vec();
        let mut offset = self.layer_sizes[0] * self.layer_sizes[1] + self.layer_sizes[1];
        for w in self.layer_sizes[1..].windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let act: Vec<Var> = current
                .iter()
                .map(|&z| self.activation.apply_graph(tape, z))
                .collect();
            current = self.affine_graph(tape, params, offset, fan_in, fan_out, &act, true);
            offset += fan_in * fan_out + fan_out;
        }
        current[0]
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        offset: usize,
        fan_in: usize,
        fan_out: usize,
        input: &[Var],
        with_bias: bool,
    ) -> Vec<Var> {
        let bias_offset = offset + fan_in * fan_out;
        let mut terms = Vec::with_capacity(fan_in + 1);
        (0..fan_out)
            .map(|o| {
                terms.clear();
                for (j, &c) in input.iter().enumerate() {
                    let m = tape.mul(params[offset + o * fan_in + j], c);
                    terms.push(m);
                }
                if with_bias {
                    terms.push(params[bias_offset + o]);
                }
                tape.sum(&terms)
            })
            .collect()
    }
}

/// 1 iff `sigmoid(logit) >= threshold`.
pub fn predict_from_logit(logit: f64, threshold: f64) -> u8 {
    u8::from(autodiff::sigmoid(logit) >= threshold)
}

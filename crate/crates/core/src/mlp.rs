//! Multilayer perceptrons with optional input-side conditioning.
//!
//! A network with `condition_dim > 0` concatenates the condition vector to
//! its input before the first affine map, so the first weight matrix has
//! shape `layer_dims[1] x (layer_dims[0] + condition_dim)`. Later layers
//! never see the condition.

use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Tape, Var};
use crate::rng::Rng;
use crate::tensor::{gemm_into, Tensor, TensorError, Transpose};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `input` and the `output`.
    pub fn derivative(self, input: f64, output: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if input > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if input > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => 1.0 - output * output,
            Activation::Sigmoid => output * (1.0 - output),
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(s) => format!("leaky_relu({s})"),
            Activation::Tanh => "tanh".into(),
            Activation::Sigmoid => "sigmoid".into(),
        }
    }

    /// Parses `identity`, `relu`, `leaky_relu`, `leaky_relu(0.1)`, `tanh`,
    /// `sigmoid`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        match s {
            "identity" | "linear" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "leaky_relu" | "lrelu" => Some(Activation::leaky()),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => {
                let inner = s.strip_prefix("leaky_relu(")?.strip_suffix(')')?;
                inner.trim().parse().ok().map(Activation::LeakyRelu)
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("network expects a condition of width {expected} but none was supplied")]
    MissingCondition { expected: usize },
    #[error("unconditional network was given a condition")]
    UnexpectedCondition,
    #[error("{what}: expected width {expected}, got {actual}")]
    Width {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, MlpError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    condition_dim: usize,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape handles for the parameters of one network.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl NetVars {
    /// Parameter handles in [`MlpNetwork::params`] order.
    pub fn ordered(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

/// Per-call options for a forward pass on a tape.
pub struct ForwardOptions<'r> {
    /// Inverted dropout after every hidden activation.
    pub dropout: Option<(f64, &'r mut Rng)>,
    /// Stop before the last activation (returns pre-activations).
    pub skip_final_activation: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            dropout: None,
            skip_final_activation: false,
        }
    }
}

impl MlpNetwork {
    /// Zero-initialised network. `activations` has one entry per affine
    /// layer, i.e. `layer_dims.len() - 1` entries.
    pub fn new(layer_dims: &[usize], activations: &[Activation], condition_dim: usize) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(MlpError::Architecture("need at least an input and an output width".into()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(MlpError::Architecture(format!("zero width in {layer_dims:?}")));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(MlpError::Architecture(format!(
                "{} widths need {} activations, got {}",
                layer_dims.len(),
                layer_dims.len() - 1,
                activations.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..layer_dims.len() - 1 {
            let fan_in = layer_dims[i] + if i == 0 { condition_dim } else { 0 };
            weights.push(Tensor::zeros(&[layer_dims[i + 1], fan_in]));
            biases.push(Tensor::zeros(&[layer_dims[i + 1]]));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activations: activations.to_vec(),
            condition_dim,
            weights,
            biases,
        })
    }

    /// Network with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
    pub fn random(layer_dims: &[usize], activations: &[Activation], condition_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::new(layer_dims, activations, condition_dim)?;
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.cols() as f64).sqrt();
            for v in w.data_mut().iter_mut().chain(b.data_mut().iter_mut()) {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit parameters, checking every shape.
    pub fn from_params(
        layer_dims: &[usize],
        activations: &[Activation],
        condition_dim: usize,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        let mut net = Self::new(layer_dims, activations, condition_dim)?;
        if weights.len() != net.weights.len() || biases.len() != net.biases.len() {
            return Err(MlpError::Architecture("parameter count does not match layers".into()));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape() != net.weights[i].shape() || b.len() != net.biases[i].len() {
                return Err(MlpError::Architecture(format!(
                    "layer {i}: weight {:?} / bias {:?} do not match expected {:?} / {:?}",
                    w.shape(),
                    b.shape(),
                    net.weights[i].shape(),
                    net.biases[i].shape()
                )));
            }
        }
        net.weights = weights;
        net.biases = biases
            .into_iter()
            .map(|b| {
                let n = b.len();
                b.reshape(&[n]).expect("length checked above")
            })
            .collect();
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two widths")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    /// Number of scalar parameters; a function of the architecture only.
    pub fn param_count(&self) -> usize {
        Self::param_count_for(&self.layer_dims, self.condition_dim)
    }

    pub fn param_count_for(layer_dims: &[usize], condition_dim: usize) -> usize {
        layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| w[1] * (w[0] + if i == 0 { condition_dim } else { 0 }) + w[1])
            .sum()
    }

    /// Parameters in the order `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for p in self.params() {
            for v in p.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    fn check_inputs(&self, input: &Tensor, condition: Option<&Tensor>) -> Result<()> {
        let (rows, cols) = input.dims2()?;
        if cols != self.input_dim() {
            return Err(MlpError::Width {
                what: "input",
                expected: self.input_dim(),
                actual: cols,
            });
        }
        match (self.condition_dim, condition) {
            (0, Some(_)) => Err(MlpError::UnexpectedCondition),
            (0, None) => Ok(()),
            (d, None) => Err(MlpError::MissingCondition { expected: d }),
            (d, Some(c)) => {
                let (cr, cc) = c.dims2()?;
                if cc != d {
                    return Err(MlpError::Width {
                        what: "condition",
                        expected: d,
                        actual: cc,
                    });
                }
                if cr != rows {
                    return Err(MlpError::Width {
                        what: "condition rows",
                        expected: rows,
                        actual: cr,
                    });
                }
                Ok(())
            }
        }
    }

    /// Batched forward pass: one sample per row of `input` (and of
    /// `condition`).
    pub fn forward(&self, input: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        self.forward_impl(input, condition, false, None)
    }

    /// Like [`forward`](Self::forward) but without the final activation.
    pub fn forward_pre_activation(&self, input: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        self.forward_impl(input, condition, true, None)
    }

    /// Affine outputs of every layer, before activation.
    pub fn pre_activations(&self, input: &Tensor, condition: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.weights.len());
        self.forward_impl(input, condition, false, Some(&mut out))?;
        Ok(out)
    }

    fn forward_impl(
        &self,
        input: &Tensor,
        condition: Option<&Tensor>,
        skip_final: bool,
        mut record: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        self.check_inputs(input, condition)?;
        let rows = input.rows();
        let mut h = match condition {
            Some(c) => Tensor::concat_cols(&input.clone().reshape(&[rows, input.cols()])?, c)?,
            None => input.clone().reshape(&[rows, input.cols()])?,
        };
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (out, fan_in) = (w.rows(), w.cols());
            let mut next = vec![0.0; rows * out];
            for r in 0..rows {
                next[r * out..(r + 1) * out].copy_from_slice(b.data());
            }
            gemm_into(&mut next, 1.0, h.data(), rows, fan_in, Transpose::No, w.data(), out, fan_in, Transpose::Yes);
            if let Some(rec) = record.as_mut() {
                rec.push(Tensor::new(&[rows, out], next.clone())?);
            }
            let act = self.activations[i];
            if !(skip_final && i == last) && act != Activation::Identity {
                for v in next.iter_mut() {
                    *v = act.apply(*v);
                }
            }
            h = Tensor::new(&[rows, out], next)?;
        }
        Ok(h)
    }

    /// Puts every parameter on `tape` (borrowed, differentiable iff
    /// `trainable`).
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> NetVars {
        NetVars {
            weights: self.weights.iter().map(|w| tape.param(w, trainable)).collect(),
            biases: self.biases.iter().map(|b| tape.param(b, trainable)).collect(),
        }
    }

    /// Forward pass recorded on a tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &NetVars,
        input: Var,
        condition: Option<Var>,
        opts: ForwardOptions<'_>,
    ) -> Result<Var> {
        self.check_inputs(tape.value(input), condition.map(|c| tape.value(c)))?;
        let mut h = match condition {
            Some(c) => tape.concat_cols(input, c)?,
            None => input,
        };
        let mut dropout = opts.dropout;
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let lin = tape.linear(h, vars.weights[i])?;
            h = tape.add_bias(lin, vars.biases[i])?;
            if i == last {
                if !opts.skip_final_activation {
                    h = tape.activation(h, self.activations[i]);
                }
            } else {
                h = tape.activation(h, self.activations[i]);
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let keep = 1.0 - *rate;
                        let shape = tape.value(h).shape().to_vec();
                        let len: usize = shape.iter().product();
                        let mask = (0..len)
                            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        h = tape.mul_const(h, Tensor::new(&shape, mask)?)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

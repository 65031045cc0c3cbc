//! Multilayer perceptron encoder with a hand-written reverse pass.
//!
//! Layers are `y = x Wᵀ + b`. The activation sits between layers; the last
//! layer is linear, so a one-layer encoder is a plain affine map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input width, hidden widths, then the embedding dimension.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            init_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(
                "encoder needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Mat::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    /// Bumped by every optimizer step; tapes from older steps are rejected.
    pub step: u64,
}

impl EncoderParams {
    /// Weights drawn in layer order, row-major, as
    /// `(2u - 1) * init_scale / sqrt(fan_in)` from `SeededRng::new(seed)`;
    /// biases start at zero.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let layers = config
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = config.init_scale / (fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                for v in layer.weight.as_mut_slice() {
                    *v = rng.symmetric() * bound;
                }
                layer
            })
            .collect();
        Ok(Self { layers, step: 0 })
    }

    /// Flat views of every tensor, weights before bias, in layer order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients shaped like [`EncoderParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Dense>,
}

impl ParamGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Cached per-layer inputs and pre-activations from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    step: u64,
    batch: usize,
    inputs: Vec<Mat>,
    pre_activations: Vec<Mat>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking their shapes against `config`.
    pub fn from_params(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let widths = &config.layer_widths;
        if params.layers.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers for {} widths",
                params.layers.len(),
                widths.len()
            )));
        }
        for (l, (layer, w)) in params.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.fan_in() != w[0] || layer.fan_out() != w[1] || layer.bias.len() != w[1] {
                return Err(Error::Config(format!(
                    "layer {l} is {}x{} (bias {}), config wants {}x{}",
                    layer.fan_out(),
                    layer.fan_in(),
                    layer.bias.len(),
                    w[1],
                    w[0]
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn forward(&self, batch: &Mat) -> Result<(Mat, ForwardTape)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "batch width {} does not match encoder input width {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let depth = self.params.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre_activations = Vec::with_capacity(depth);
        let mut h = batch.clone();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut pre = h.matmul_transposed(&layer.weight)?;
            for r in 0..pre.rows() {
                for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let out = if l + 1 < depth {
                let mut a = pre.clone();
                for v in a.as_mut_slice() {
                    *v = self.config.activation.apply(*v);
                }
                a
            } else {
                pre.clone()
            };
            inputs.push(h);
            pre_activations.push(pre);
            h = out;
        }
        let tape = ForwardTape {
            step: self.params.step,
            batch: batch.rows(),
            inputs,
            pre_activations,
        };
        Ok((h, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn embed(&self, batch: &Mat) -> Result<Mat> {
        self.forward(batch).map(|(z, _)| z)
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the input batch.
    pub fn backward(&self, tape: &ForwardTape, grad_embeddings: &Mat) -> Result<(ParamGrads, Mat)> {
        if tape.step != self.params.step || tape.inputs.len() != self.params.layers.len() {
            return Err(Error::Usage(format!(
                "tape recorded at step {} but parameters are at step {}",
                tape.step, self.params.step
            )));
        }
        if grad_embeddings.rows() != tape.batch || grad_embeddings.cols() != self.embedding_dim() {
            return Err(Error::Usage(format!(
                "gradient is {}x{}, forward produced {}x{}",
                grad_embeddings.rows(),
                grad_embeddings.cols(),
                tape.batch,
                self.embedding_dim()
            )));
        }
        let depth = self.params.layers.len();
        let mut grads: Vec<Dense> = Vec::with_capacity(depth);
        let mut upstream = grad_embeddings.clone();
        for l in (0..depth).rev() {
            let layer = &self.params.layers[l];
            if l + 1 < depth {
                let pre = &tape.pre_activations[l];
                for (g, &a) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= self.config.activation.derivative(a);
                }
            }
            let input = &tape.inputs[l];
            let mut grad = Dense::zeros(layer.fan_in(), layer.fan_out());
            let mut grad_input = Mat::zeros(tape.batch, layer.fan_in());
            for b in 0..tape.batch {
                let g_row = upstream.row(b);
                let x_row = input.row(b);
                for (o, &g) in g_row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[o] += g;
                    let w_row = layer.weight.row(o);
                    let gw = grad.weight.row_mut(o);
                    for (acc, &x) in gw.iter_mut().zip(x_row) {
                        *acc += g * x;
                    }
                    for (acc, &w) in grad_input.row_mut(b).iter_mut().zip(w_row) {
                        *acc += g * w;
                    }
                }
            }
            grads.push(grad);
            upstream = grad_input;
        }
        grads.reverse();
        Ok((ParamGrads { layers: grads }, upstream))
    }
}

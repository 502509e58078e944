use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{Gradients, Tape, Var};
use crate::diffcore::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// One stage of a sequential model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    /// 3x3 kernel, padding 1, with bias.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool2d,
    Flatten,
    LogSoftmax,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "Dense",
            Layer::Conv2d { .. } => "Conv2d",
            Layer::Relu => "ReLU",
            Layer::MaxPool2d => "MaxPool2d",
            Layer::Flatten => "Flatten",
            Layer::LogSoftmax => "LogSoftmax",
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Dense { inputs, outputs, bias } => {
                let mut v = vec![vec![outputs, inputs]];
                if bias {
                    v.push(vec![outputs]);
                }
                v
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
            } => vec![vec![out_channels, in_channels, 3, 3], vec![out_channels]],
            _ => Vec::new(),
        }
    }

    // Per-sample output shape, or a message explaining the mismatch.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            Layer::Dense { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(format!("expects [{}] per sample, got {:?}", inputs, input));
                }
                Ok(vec![outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(format!("expects [{}, H, W] per sample, got {:?}", in_channels, input));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return Err(format!("expects [C, H>=2, W>=2], got {:?}", input));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::LogSoftmax => {
                if input.len() != 1 || input[0] == 0 {
                    return Err(format!("expects [C] per sample, got {:?}", input));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Architecture description: per-sample input shape plus layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Softmax regression.
    pub fn linear(inputs: usize, classes: usize) -> Self {
        ModelSpec {
            input_shape: vec![inputs],
            layers: vec![
                Layer::Dense {
                    inputs,
                    outputs: classes,
                    bias: true,
                },
                Layer::LogSoftmax,
            ],
        }
    }

    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Self {
        ModelSpec {
            input_shape: vec![inputs],
            layers: vec![
                Layer::Dense {
                    inputs,
                    outputs: hidden,
                    bias: true,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: hidden,
                    outputs: classes,
                    bias: true,
                },
                Layer::LogSoftmax,
            ],
        }
    }

    /// MLP with a single real-valued output and no softmax.
    pub fn mlp_regressor(inputs: usize, hidden: usize) -> Self {
        ModelSpec {
            input_shape: vec![inputs],
            layers: vec![
                Layer::Dense {
                    inputs,
                    outputs: hidden,
                    bias: true,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: hidden,
                    outputs: 1,
                    bias: true,
                },
            ],
        }
    }

    /// Two conv/pool stages after an initial 2x2 pool, then a linear head.
    pub fn small_cnn(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self::cnn([channels, height, width], 1, 8, 16, classes)
    }

    /// `pre_pool` 2x2 max-pools, then two conv(3x3)/ReLU/pool stages with
    /// `c1` and `c2` channels, then a linear head.
    pub fn cnn(input: [usize; 3], pre_pool: usize, c1: usize, c2: usize, classes: usize) -> Self {
        let [channels, height, width] = input;
        let shrink = 1 << (pre_pool + 2);
        let mut layers = vec![Layer::MaxPool2d; pre_pool];
        layers.extend([
            Layer::Conv2d {
                in_channels: channels,
                out_channels: c1,
            },
            Layer::Relu,
            Layer::MaxPool2d,
            Layer::Conv2d {
                in_channels: c1,
                out_channels: c2,
            },
            Layer::Relu,
            Layer::MaxPool2d,
            Layer::Flatten,
            Layer::Dense {
                inputs: c2 * (height / shrink) * (width / shrink),
                outputs: classes,
                bias: true,
            },
            Layer::LogSoftmax,
        ]);
        ModelSpec {
            input_shape: input.to_vec(),
            layers,
        }
    }

    /// Validates that the layers compose and returns the per-sample output
    /// shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|message| Error::Layer {
                index,
                kind: layer.name(),
                message,
            })?;
        }
        Ok(shape)
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::LogSoftmax))
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }
}

/// Sequential model with its trainable parameters in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Uniform fan-in initialization (He bound for weights, zero bias).
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.output_shape()?;
        let mut params = Vec::new();
        for layer in &spec.layers {
            for (i, shape) in layer.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = if i == 0 {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
                } else {
                    vec![T::zero(); n]
                };
                params.push(Tensor::new(shape, data)?.with_grad());
            }
        }
        Ok(Model { spec, params })
    }

    /// All parameters zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.output_shape()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|s| Tensor::zeros(s).with_grad())
            .collect();
        Ok(Model { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.output_shape()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "architecture declares {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter {}: expected {:?}, got {:?}",
                    i,
                    s,
                    p.shape()
                )));
            }
        }
        let params = params
            .into_iter()
            .map(|mut p| {
                p.requires_grad = true;
                p
            })
            .collect();
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Records the forward pass of `x` (shape `[N, ..input_shape]`).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let in_shape = tape.value(x).shape().to_vec();
        if in_shape.is_empty() || in_shape[1..] != self.spec.input_shape[..] {
            return Err(Error::Layer {
                index: 0,
                kind: self.spec.layers.first().map_or("input", |l| l.name()),
                message: format!(
                    "batch shape {:?} does not match declared input [N, {:?}]",
                    in_shape, self.spec.input_shape
                ),
            });
        }
        let n = in_shape[0];
        let mut slot = 0;
        let mut h = x;
        for (index, layer) in self.spec.layers.iter().enumerate() {
            let wrap = |e: Error| Error::Layer {
                index,
                kind: layer.name(),
                message: e.to_string(),
            };
            h = match *layer {
                Layer::Dense { bias, .. } => {
                    let w = tape.param(slot, &self.params[slot]);
                    slot += 1;
                    let b = if bias {
                        let b = tape.param(slot, &self.params[slot]);
                        slot += 1;
                        Some(b)
                    } else {
                        None
                    };
                    tape.dense(h, w, b).map_err(wrap)?
                }
                Layer::Conv2d { .. } => {
                    let w = tape.param(slot, &self.params[slot]);
                    let b = tape.param(slot + 1, &self.params[slot + 1]);
                    slot += 2;
                    tape.conv3x3(h, w, Some(b)).map_err(wrap)?
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool2d => tape.max_pool2(h).map_err(wrap)?,
                Layer::Flatten => {
                    let width = tape.value(h).row_width();
                    tape.reshape(h, vec![n, width]).map_err(wrap)?
                }
                Layer::LogSoftmax => tape.log_softmax(h).map_err(wrap)?,
            };
        }
        Ok(h)
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Adds gradients from a backward pass into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            match grads.get(i) {
                Some(g) => p.accumulate_grad(g),
                None => p.accumulate_grad(&vec![T::zero(); p.len()]),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{GradTape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
        #[serde(default = "bn_eps")]
        eps: f64,
        #[serde(default = "bn_momentum")]
        momentum: f64,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
    },
    Flatten,
    SoftmaxCrossEntropy,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn bn_eps() -> f64 {
    1e-5
}
fn bn_momentum() -> f64 {
    0.1
}

impl LayerSpec {
    fn label(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batch_norm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Linear weight matrix or convolution kernel.
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    /// Kernel area times output channels (or output features).
    pub fan_out: usize,
    pub is_conv: bool,
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub name: String,
    pub layer: usize,
    pub channels: usize,
}

/// Layer stack plus the per-sample input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture {
            input_shape,
            layers,
        };
        arch.output_shape()?;
        Ok(arch)
    }

    /// `sizes[0] -> ... -> sizes[last]` with ReLU between linear layers and a
    /// softmax cross-entropy head.
    pub fn mlp(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least two sizes".into()));
        }
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            layers.push(LayerSpec::Linear {
                input: pair[0],
                output: pair[1],
                bias: true,
            });
            if i + 2 < sizes.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        layers.push(LayerSpec::SoftmaxCrossEntropy);
        Architecture::new(vec![sizes[0]], layers)
    }

    /// Two 3x3 conv + BN + ReLU blocks, 2x2 max pooling, then a linear head.
    pub fn small_cnn(in_ch: usize, h: usize, w: usize, classes: usize) -> Result<Self> {
        let (c1, c2) = (8, 16);
        let layers = vec![
            LayerSpec::Conv2d {
                in_ch,
                out_ch: c1,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            LayerSpec::BatchNorm2d {
                channels: c1,
                eps: bn_eps(),
                momentum: bn_momentum(),
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_ch: c1,
                out_ch: c2,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            LayerSpec::BatchNorm2d {
                channels: c2,
                eps: bn_eps(),
                momentum: bn_momentum(),
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { kernel: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                input: c2 * (h / 2) * (w / 2),
                output: classes,
                bias: true,
            },
            LayerSpec::SoftmaxCrossEntropy,
        ];
        Architecture::new(vec![in_ch, h, w], layers)
    }

    pub fn has_loss_head(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::SoftmaxCrossEntropy))
    }

    /// Per-sample output shape, checking every layer on the way.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let err = |detail: String| Error::Dimension {
                layer: format!("layer {idx} ({})", layer.label()),
                detail,
            };
            shape = match *layer {
                LayerSpec::Linear { input, output, .. } => {
                    if shape != [input] {
                        return Err(err(format!("expects [{input}], got {shape:?}")));
                    }
                    vec![output]
                }
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if kernel == 0 || stride == 0 {
                        return Err(err("kernel and stride must be >= 1".into()));
                    }
                    if shape.len() != 3 || shape[0] != in_ch {
                        return Err(err(format!("expects [{in_ch}, H, W], got {shape:?}")));
                    }
                    if shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel {
                        return Err(err(format!("kernel {kernel} exceeds input {shape:?}")));
                    }
                    vec![
                        out_ch,
                        (shape[1] + 2 * padding - kernel) / stride + 1,
                        (shape[2] + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::BatchNorm2d { channels, eps, .. } => {
                    if eps <= 0.0 {
                        return Err(err("eps must be positive".into()));
                    }
                    if shape.first() != Some(&channels) {
                        return Err(err(format!("expects {channels} channels, got {shape:?}")));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool2d { kernel } => {
                    if shape.len() != 3 || kernel == 0 || shape[1] < kernel || shape[2] < kernel {
                        return Err(err(format!("window {kernel} on {shape:?}")));
                    }
                    vec![shape[0], shape[1] / kernel, shape[2] / kernel]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::SoftmaxCrossEntropy => {
                    if shape.len() != 1 || idx + 1 != self.layers.len() {
                        return Err(err("loss head must be last and follow a vector".into()));
                    }
                    shape
                }
            };
        }
        Ok(shape)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Linear {
                    input,
                    output,
                    bias,
                } => {
                    out.push(ParamSpec {
                        name: format!("layer{idx}.weight"),
                        layer: idx,
                        role: ParamRole::Weight,
                        shape: vec![output, input],
                        fan_in: input,
                        fan_out: output,
                        is_conv: false,
                    });
                    if bias {
                        out.push(ParamSpec {
                            name: format!("layer{idx}.bias"),
                            layer: idx,
                            role: ParamRole::Bias,
                            shape: vec![output],
                            fan_in: input,
                            fan_out: output,
                            is_conv: false,
                        });
                    }
                }
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    ..
                } => {
                    let area = kernel * kernel;
                    out.push(ParamSpec {
                        name: format!("layer{idx}.weight"),
                        layer: idx,
                        role: ParamRole::Weight,
                        shape: vec![out_ch, in_ch, kernel, kernel],
                        fan_in: in_ch * area,
                        fan_out: out_ch * area,
                        is_conv: true,
                    });
                    if bias {
                        out.push(ParamSpec {
                            name: format!("layer{idx}.bias"),
                            layer: idx,
                            role: ParamRole::Bias,
                            shape: vec![out_ch],
                            fan_in: in_ch * area,
                            fan_out: out_ch * area,
                            is_conv: true,
                        });
                    }
                }
                LayerSpec::BatchNorm2d { channels, .. } => {
                    for (suffix, role) in [("gamma", ParamRole::BnScale), ("beta", ParamRole::BnShift)]
                    {
                        out.push(ParamSpec {
                            name: format!("layer{idx}.{suffix}"),
                            layer: idx,
                            role,
                            shape: vec![channels],
                            fan_in: channels,
                            fan_out: channels,
                            is_conv: false,
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Running statistics, two buffers (mean, var) per batch-norm layer.
    pub fn buffer_specs(&self) -> Vec<BufferSpec> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::BatchNorm2d { channels, .. } = *layer {
                for suffix in ["running_mean", "running_var"] {
                    out.push(BufferSpec {
                        name: format!("layer{idx}.{suffix}"),
                        layer: idx,
                        channels,
                    });
                }
            }
        }
        out
    }

    pub fn initial_buffers<T: Real>(&self) -> Vec<Tensor<T>> {
        self.buffer_specs()
            .iter()
            .map(|b| {
                let fill = if b.name.ends_with("running_var") {
                    T::one()
                } else {
                    T::zero()
                };
                Tensor::full(&[b.channels], fill)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers; running statistics are updated.
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Record gradients with respect to the input batch as well.
    pub input_grad: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            input_grad: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            input_grad: false,
        }
    }
}

pub struct ForwardPass<T> {
    pub tape: GradTape<T>,
    pub input: Var,
    /// One leaf per parameter, in `param_specs` order.
    pub params: Vec<Var>,
    /// Logits of shape `[N, classes]`.
    pub logits: Var,
    /// Scalar mean cross-entropy when labels were given.
    pub loss: Option<Var>,
    /// Updated running statistics (train mode only).
    pub buffers: Option<Vec<Tensor<T>>>,
}

impl<T: Real> ForwardPass<T> {
    /// The loss if present, otherwise the logits.
    pub fn output(&self) -> Var {
        self.loss.unwrap_or(self.logits)
    }
}

/// Runs `input` (`[N, ..input_shape]`) through the network, recording every
/// operation on a fresh tape.
pub fn forward<T: Real>(
    arch: &Architecture,
    params: &[&Tensor<T>],
    buffers: &[Tensor<T>],
    input: &Tensor<T>,
    labels: Option<&[usize]>,
    opts: ForwardOptions,
) -> Result<ForwardPass<T>> {
    let specs = arch.param_specs();
    if params.len() != specs.len() {
        return Err(Error::Contract(format!(
            "{} parameters given, architecture has {}",
            params.len(),
            specs.len()
        )));
    }
    for (spec, p) in specs.iter().zip(params) {
        if p.shape() != spec.shape.as_slice() {
            return Err(Error::Dimension {
                layer: format!("layer {} parameter {}", spec.layer, spec.name),
                detail: format!("expected {:?}, got {:?}", spec.shape, p.shape()),
            });
        }
    }
    if input.shape().len() != arch.input_shape.len() + 1
        || input.shape()[1..] != arch.input_shape[..]
    {
        return Err(Error::Dimension {
            layer: "layer 0 (input)".into(),
            detail: format!(
                "expected [N, {:?}], got {:?}",
                arch.input_shape,
                input.shape()
            ),
        });
    }
    let n = input.shape()[0];

    let mut tape = GradTape::new();
    let input_var = tape.leaf(input.clone(), opts.input_grad);
    let param_vars: Vec<Var> = params.iter().map(|p| tape.leaf((*p).clone(), true)).collect();
    let mut new_buffers = (opts.mode == Mode::Train).then(|| buffers.to_vec());

    let mut pi = 0;
    let mut bi = 0;
    let mut x = input_var;
    let mut loss = None;
    for (idx, layer) in arch.layers.iter().enumerate() {
        let named = |e: Error| match e {
            Error::Dimension { detail, .. } => Error::Dimension {
                layer: format!("layer {idx} ({})", layer.label()),
                detail,
            },
            other => other,
        };
        x = match *layer {
            LayerSpec::Linear { bias, .. } => {
                let w = param_vars[pi];
                let b = bias.then(|| param_vars[pi + 1]);
                pi += 1 + bias as usize;
                tape.linear(x, w, b).map_err(named)?
            }
            LayerSpec::Conv2d {
                stride,
                padding,
                bias,
                ..
            } => {
                let w = param_vars[pi];
                let b = bias.then(|| param_vars[pi + 1]);
                pi += 1 + bias as usize;
                tape.conv2d(x, w, b, stride, padding).map_err(named)?
            }
            LayerSpec::BatchNorm2d { eps, momentum, .. } => {
                let (g, b) = (param_vars[pi], param_vars[pi + 1]);
                pi += 2;
                let out = match opts.mode {
                    Mode::Train => {
                        let (y, mean, var) =
                            tape.batch_norm_train(x, g, b, eps).map_err(named)?;
                        let bufs = new_buffers.as_mut().expect("train mode buffers");
                        let m = T::from_f64(momentum);
                        let keep = T::one() - m;
                        for (r, &s) in bufs[bi].data_mut().iter_mut().zip(&mean) {
                            *r = keep * *r + m * s;
                        }
                        for (r, &s) in bufs[bi + 1].data_mut().iter_mut().zip(&var) {
                            *r = keep * *r + m * s;
                        }
                        y
                    }
                    Mode::Eval => tape
                        .batch_norm_eval(
                            x,
                            g,
                            b,
                            buffers[bi].data(),
                            buffers[bi + 1].data(),
                            eps,
                        )
                        .map_err(named)?,
                };
                bi += 2;
                out
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::MaxPool2d { kernel } => tape.max_pool2d(x, kernel).map_err(named)?,
            LayerSpec::Flatten => {
                let per: usize = tape.value(x).shape()[1..].iter().product();
                tape.reshape(x, &[n, per]).map_err(named)?
            }
            LayerSpec::SoftmaxCrossEntropy => {
                if let Some(labels) = labels {
                    loss = Some(tape.softmax_cross_entropy(x, labels).map_err(named)?);
                }
                x
            }
        };
    }
    Ok(ForwardPass {
        tape,
        input: input_var,
        params: param_vars,
        logits: x,
        loss,
        buffers: new_buffers,
    })
}

/// A plain network: architecture, parameters and batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f64> {
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> Network<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Eval-mode logits.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = self.params.iter().collect();
        let pass = forward(
            &self.arch,
            &refs,
            &self.buffers,
            input,
            None,
            ForwardOptions::eval(),
        )?;
        Ok(pass.tape.value(pass.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_layout() {
        let arch = Architecture::mlp(&[4, 3, 2]).unwrap();
        let specs = arch.param_specs();
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["layer0.weight", "layer0.bias", "layer2.weight", "layer2.bias"]
        );
        assert_eq!(specs[0].shape, vec![3, 4]);
        assert_eq!(arch.output_shape().unwrap(), vec![2]);
    }

    #[test]
    fn small_cnn_shapes() {
        let arch = Architecture::small_cnn(1, 8, 8, 10).unwrap();
        assert_eq!(arch.output_shape().unwrap(), vec![10]);
        assert_eq!(arch.buffer_specs().len(), 4);
    }

    #[test]
    fn mismatched_layers_name_the_culprit() {
        let err = Architecture::new(
            vec![4],
            vec![
                LayerSpec::Linear {
                    input: 4,
                    output: 3,
                    bias: true,
                },
                LayerSpec::Linear {
                    input: 5,
                    output: 2,
                    bias: true,
                },
            ],
        )
        .unwrap_err();
        match err {
            Error::Dimension { layer, .. } => assert!(layer.contains("layer 1")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let arch = Architecture::mlp(&[2, 2]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let r = forward(&arch, &[&w, &b], &[], &x, None, ForwardOptions::eval());
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}

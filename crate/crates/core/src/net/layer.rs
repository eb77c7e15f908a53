use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer kind and hyper-parameters; the weights live in [`Layer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Flatten,
}

/// How the backward pass treats relu units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    /// Pass the signal where the forward input was positive.
    Standard,
    /// Additionally drop negative backward signals (guided backpropagation).
    Guided,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    /// Weight and bias shapes, `None` for parameter-free layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::LayerGraph(msg));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad(format!("dense expects input [{inputs}], got {input:?}"));
                }
                if outputs == 0 {
                    return bad("dense with zero outputs".into());
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(format!(
                        "conv2d expects [{in_channels}, H, W], got {input:?}"
                    ));
                }
                if stride == 0 || kernel == 0 || out_channels == 0 {
                    return bad("conv2d needs positive kernel, stride and channel count".into());
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return bad(format!("conv2d kernel {kernel} larger than padded input"));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { size, stride } => {
                if input.len() != 3 {
                    return bad(format!("maxpool2d expects [C, H, W], got {input:?}"));
                }
                if size == 0 || stride == 0 || input[1] < size || input[2] < size {
                    return bad(format!("maxpool2d size {size} does not fit {input:?}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - size) / stride + 1,
                    (input[2] - size) / stride + 1,
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// A layer together with its parameters. Parameter-free layers carry empty tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    spec: LayerSpec,
    weight: Tensor<S>,
    bias: Tensor<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn new(spec: LayerSpec, weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        match spec.param_shapes() {
            Some((ws, bs)) => {
                if weight.shape() != ws.as_slice() || bias.shape() != bs.as_slice() {
                    return Err(Error::LayerGraph(format!(
                        "{} parameters have shapes {:?}/{:?}, expected {:?}/{:?}",
                        spec.kind_name(),
                        weight.shape(),
                        bias.shape(),
                        ws,
                        bs
                    )));
                }
            }
            None => {
                if !weight.is_empty() || !bias.is_empty() {
                    return Err(Error::LayerGraph(format!(
                        "{} layer takes no parameters",
                        spec.kind_name()
                    )));
                }
            }
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self { spec, weight, bias })
    }

    /// A parameter-free layer, or a parameterized one with zero weights.
    pub fn zeroed(spec: LayerSpec) -> Self {
        let (weight, bias) = match spec.param_shapes() {
            Some((ws, bs)) => (Tensor::zeros(&ws), Tensor::zeros(&bs)),
            None => (Tensor::zeros(&[0]), Tensor::zeros(&[0])),
        };
        Self { spec, weight, bias }
    }

    #[inline]
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> &Tensor<S> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<S> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<S> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<S> {
        &mut self.bias
    }

    pub fn has_params(&self) -> bool {
        self.spec.param_shapes().is_some()
    }

    /// Forward pass. The caller guarantees `input` has the layer's input shape.
    pub fn forward(&self, input: &Tensor<S>, out_shape: &[usize]) -> Tensor<S> {
        match self.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let x = input.data();
                let w = self.weight.data();
                let b = self.bias.data();
                Tensor::from_fn(out_shape, |o| {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    b[o] + row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<S>()
                })
                .reshape(&[outputs])
                .expect("dense output shape")
            }
            LayerSpec::Conv2d { .. } => self.conv_forward(input, out_shape),
            LayerSpec::Relu => input.map(|v| v.max(S::zero())),
            LayerSpec::MaxPool2d { size, stride } => {
                let geo = PoolGeometry::new(input.shape(), out_shape, size, stride);
                let x = input.data();
                Tensor::from_fn(out_shape, |o| x[geo.argmax(x, o)])
            }
            LayerSpec::Flatten => input.clone().reshape(out_shape).expect("flatten shape"),
        }
    }

    /// Gradient with respect to the layer input, given the gradient at its output.
    pub fn backward(&self, input: &Tensor<S>, grad_out: &Tensor<S>, rule: ReluRule) -> Tensor<S> {
        match self.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                self.linear_transpose(input.shape(), grad_out)
            }
            LayerSpec::Relu => input.zip_map(grad_out, |x, g| {
                let pass = x > S::zero() && (rule == ReluRule::Standard || g > S::zero());
                if pass {
                    g
                } else {
                    S::zero()
                }
            }),
            LayerSpec::MaxPool2d { size, stride } => {
                self.route_to_max(input, grad_out, size, stride)
            }
            LayerSpec::Flatten => grad_out
                .clone()
                .reshape(input.shape())
                .expect("flatten backward shape"),
        }
    }

    /// Applies the transpose of the linear part (no bias) of a dense or conv layer.
    pub(crate) fn linear_transpose(&self, in_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
        match self.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let w = self.weight.data();
                let g = grad_out.data();
                let mut gi = vec![S::zero(); inputs];
                for o in 0..outputs {
                    let go = g[o];
                    if go.is_zero() {
                        continue;
                    }
                    let row = &w[o * inputs..(o + 1) * inputs];
                    for (acc, &wi) in gi.iter_mut().zip(row) {
                        *acc = *acc + wi * go;
                    }
                }
                Tensor::new(vec![inputs], gi).expect("dense backward shape")
            }
            LayerSpec::Conv2d { .. } => self.conv_transpose(in_shape, grad_out),
            _ => unreachable!("linear_transpose on {}", self.spec.kind_name()),
        }
    }

    /// Routes values at the pool output to the first maximal input cell of each window.
    pub(crate) fn route_to_max(
        &self,
        input: &Tensor<S>,
        grad_out: &Tensor<S>,
        size: usize,
        stride: usize,
    ) -> Tensor<S> {
        let geo = PoolGeometry::new(input.shape(), grad_out.shape(), size, stride);
        let x = input.data();
        let mut gi = Tensor::zeros(input.shape());
        let gd = gi.data_mut();
        for (o, &g) in grad_out.data().iter().enumerate() {
            let i = geo.argmax(x, o);
            gd[i] = gd[i] + g;
        }
        gi
    }

    /// Adds parameter gradients for one sample into `dw`/`db`.
    pub fn accumulate_param_grads(
        &self,
        input: &Tensor<S>,
        grad_out: &Tensor<S>,
        dw: &mut [S],
        db: &mut [S],
    ) {
        match self.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let x = input.data();
                let g = grad_out.data();
                for o in 0..outputs {
                    let go = g[o];
                    db[o] = db[o] + go;
                    if go.is_zero() {
                        continue;
                    }
                    for (acc, &xi) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                        *acc = *acc + go * xi;
                    }
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (ih, iw) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
                let x = input.data();
                let g = grad_out.data();
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(o * oh + oy) * ow + ox];
                            db[o] = db[o] + go;
                            if go.is_zero() {
                                continue;
                            }
                            for c in 0..in_channels {
                                for ky in 0..kernel {
                                    let Some(iy) = tap(oy, ky, stride, padding, ih) else {
                                        continue;
                                    };
                                    for kx in 0..kernel {
                                        let Some(ix) = tap(ox, kx, stride, padding, iw) else {
                                            continue;
                                        };
                                        let wi =
                                            ((o * in_channels + c) * kernel + ky) * kernel + kx;
                                        dw[wi] = dw[wi] + go * x[(c * ih + iy) * iw + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn conv_forward(&self, input: &Tensor<S>, out_shape: &[usize]) -> Tensor<S> {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec
        else {
            unreachable!()
        };
        let (ih, iw) = (input.shape()[1], input.shape()[2]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let x = input.data();
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![S::zero(); out_channels * oh * ow];
        for o in 0..out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..in_channels {
                        for ky in 0..kernel {
                            let Some(iy) = tap(oy, ky, stride, padding, ih) else {
                                continue;
                            };
                            let wrow = ((o * in_channels + c) * kernel + ky) * kernel;
                            let xrow = (c * ih + iy) * iw;
                            for kx in 0..kernel {
                                let Some(ix) = tap(ox, kx, stride, padding, iw) else {
                                    continue;
                                };
                                acc = acc + w[wrow + kx] * x[xrow + ix];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
    }

    fn conv_transpose(&self, in_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec
        else {
            unreachable!()
        };
        let (ih, iw) = (in_shape[1], in_shape[2]);
        let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
        let w = self.weight.data();
        let g = grad_out.data();
        let mut gi = vec![S::zero(); in_channels * ih * iw];
        for o in 0..out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(o * oh + oy) * ow + ox];
                    if go.is_zero() {
                        continue;
                    }
                    for c in 0..in_channels {
                        for ky in 0..kernel {
                            let Some(iy) = tap(oy, ky, stride, padding, ih) else {
                                continue;
                            };
                            let wrow = ((o * in_channels + c) * kernel + ky) * kernel;
                            let xrow = (c * ih + iy) * iw;
                            for kx in 0..kernel {
                                let Some(ix) = tap(ox, kx, stride, padding, iw) else {
                                    continue;
                                };
                                gi[xrow + ix] = gi[xrow + ix] + w[wrow + kx] * go;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(in_shape.to_vec(), gi).expect("conv backward shape")
    }
}

/// Input coordinate read by output position `o` at kernel offset `k`, if inside the image.
#[inline]
fn tap(o: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let p = o * stride + k;
    if p < padding || p - padding >= extent {
        None
    } else {
        Some(p - padding)
    }
}

struct PoolGeometry {
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    size: usize,
    stride: usize,
}

impl PoolGeometry {
    fn new(input: &[usize], output: &[usize], size: usize, stride: usize) -> Self {
        Self {
            ih: input[1],
            iw: input[2],
            oh: output[1],
            ow: output[2],
            size,
            stride,
        }
    }

    /// Flat input index of the first maximal cell (row-major within the window)
    /// for flat output index `o`.
    #[inline]
    fn argmax<S: Scalar>(&self, x: &[S], o: usize) -> usize {
        let c = o / (self.oh * self.ow);
        let oy = (o / self.ow) % self.oh;
        let ox = o % self.ow;
        let base = c * self.ih * self.iw;
        let mut best = base + (oy * self.stride) * self.iw + ox * self.stride;
        for dy in 0..self.size {
            for dx in 0..self.size {
                let i = base + (oy * self.stride + dy) * self.iw + ox * self.stride + dx;
                if x[i] > x[best] {
                    best = i;
                }
            }
        }
        best
    }
}

//! Layer stacks: architecture descriptors, parameter storage, and forward /
//! backward passes with retained intermediates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, pooled_extent};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side length of the square face crop fed to the network.
pub const CROP: usize = 40;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel_h: usize, kernel_w: usize },
    Maxpool { window: usize, stride: usize },
    Abstanh,
    Dense { units: usize },
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Input shape plus the ordered layer list. Parametric layers are named in
/// order of appearance: convolutions `CL<i>`, dense layers `FC<i>`, with one
/// shared counter (`CL1..CL4, FC5, FC6` for the default stack).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Four conv layers with pooling after the first three, a 100-unit dense
    /// layer and a linear `2m` output.
    pub fn default_for(landmarks: usize) -> Self {
        use LayerSpec::*;
        let conv = |c, k| Conv { out_channels: c, kernel_h: k, kernel_w: k };
        let pool = Maxpool { window: 2, stride: 2 };
        Self {
            input_shape: [CROP, CROP, CHANNELS],
            layers: vec![
                conv(16, 5),
                Abstanh,
                pool,
                conv(48, 3),
                Abstanh,
                pool,
                conv(64, 3),
                Abstanh,
                pool,
                conv(64, 2),
                Abstanh,
                Dense { units: 100 },
                Abstanh,
                Dense { units: 2 * landmarks },
            ],
        }
    }

    /// Shapes of the input to every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        let mut cur = self.input_shape.to_vec();
        let mut flat = false;
        for (i, spec) in self.layers.iter().enumerate() {
            cur = match *spec {
                LayerSpec::Conv { out_channels, kernel_h, kernel_w } => {
                    if flat {
                        return Err(Error::Shape(format!("layer {i}: conv after dense")));
                    }
                    if out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                        return Err(Error::Shape(format!("layer {i}: zero conv extent")));
                    }
                    if cur[0] < kernel_h || cur[1] < kernel_w {
                        return Err(Error::Shape(format!(
                            "layer {i}: {}x{} map smaller than {kernel_h}x{kernel_w} kernel",
                            cur[0], cur[1]
                        )));
                    }
                    vec![cur[0] - kernel_h + 1, cur[1] - kernel_w + 1, out_channels]
                }
                LayerSpec::Maxpool { window, stride } => {
                    if flat {
                        return Err(Error::Shape(format!("layer {i}: pooling after dense")));
                    }
                    if window == 0 || stride == 0 {
                        return Err(Error::Shape(format!("layer {i}: zero pooling extent")));
                    }
                    vec![
                        pooled_extent(cur[0], window, stride),
                        pooled_extent(cur[1], window, stride),
                        cur[2],
                    ]
                }
                LayerSpec::Abstanh => cur,
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::Shape(format!("layer {i}: dense layer with 0 units")));
                    }
                    flat = true;
                    vec![units]
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|s| s.iter().product()).unwrap_or(0))
    }

    /// `(name, layer index)` of every parametric layer.
    pub fn named_layers(&self) -> Vec<(String, usize)> {
        let mut n = 0;
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_params())
            .map(|(i, s)| {
                n += 1;
                let prefix = if matches!(s, LayerSpec::Conv { .. }) { "CL" } else { "FC" };
                (format!("{prefix}{n}"), i)
            })
            .collect()
    }

    /// Index of the layer whose input a tap name refers to. `input` is the
    /// raw normalized image, i.e. the input to layer 0.
    pub fn tap_index(&self, tap: &str) -> Result<usize> {
        if tap.eq_ignore_ascii_case("input") || tap.eq_ignore_ascii_case("rgb") {
            return Ok(0);
        }
        self.named_layers()
            .into_iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(tap))
            .map(|(_, i)| i)
            .ok_or_else(|| Error::UnknownTap(tap.to_string()))
    }

    /// Tap names in network order, ending at the first dense layer.
    pub fn analysis_taps(&self) -> Vec<String> {
        let mut taps = vec!["input".to_string()];
        for (name, i) in self.named_layers() {
            if i == 0 {
                continue;
            }
            taps.push(name);
            if matches!(self.layers[i], LayerSpec::Dense { .. }) {
                break;
            }
        }
        taps
    }

    /// Name of the first dense layer, the default tweaking tap.
    pub fn first_dense(&self) -> Option<String> {
        self.named_layers()
            .into_iter()
            .find(|(_, i)| matches!(self.layers[*i], LayerSpec::Dense { .. }))
            .map(|(n, _)| n)
    }

    pub fn feature_len(&self, tap: &str) -> Result<usize> {
        let idx = self.tap_index(tap)?;
        Ok(self.shapes()?[idx].iter().product())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv { kernels: Tensor<T>, bias: Tensor<T> },
    MaxPool { window: usize, stride: usize },
    AbsTanh,
    Dense { weights: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv { kernels: w, bias } | Layer::Dense { weights: w, bias } => Some((w, bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::Conv { kernels: w, bias } | Layer::Dense { weights: w, bias } => Some((w, bias)),
            _ => None,
        }
    }
}

/// Intermediates retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `inputs[i]` is the input to layer `i`.
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    argmax: Vec<Option<Vec<usize>>>,
}

/// Per-layer `(weight grad, bias grad)`, `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(layers: &[Layer<T>]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| l.params().map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape()))))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a, b) {
                aw.axpy(T::one(), bw)?;
                ab.axpy(T::one(), bb)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.scale(alpha);
            b.scale(alpha);
        }
    }

    /// Flat parameter order: for each parametric layer, weights then bias.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flatten().flat_map(|(w, b)| [w, b]).collect()
    }
}

pub fn forward_stack<T: Scalar>(layers: &[Layer<T>], input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut cur = input.clone();
    for layer in layers {
        cur = match layer {
            Layer::Conv { kernels, bias } => layers::conv_forward(&cur, kernels, bias)?,
            Layer::MaxPool { window, stride } => layers::maxpool_forward(&cur, *window, *stride)?.0,
            Layer::AbsTanh => layers::abstanh(&cur),
            Layer::Dense { weights, bias } => layers::dense_forward(&cur, weights, bias)?,
        };
    }
    Ok(cur)
}

pub fn forward_stack_traced<T: Scalar>(layers: &[Layer<T>], input: &Tensor<T>) -> Result<Trace<T>> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut argmax = Vec::with_capacity(layers.len());
    let mut cur = input.clone();
    for layer in layers {
        let (next, arg) = match layer {
            Layer::Conv { kernels, bias } => (layers::conv_forward(&cur, kernels, bias)?, None),
            Layer::MaxPool { window, stride } => {
                let (y, a) = layers::maxpool_forward(&cur, *window, *stride)?;
                (y, Some(a))
            }
            Layer::AbsTanh => (layers::abstanh(&cur), None),
            Layer::Dense { weights, bias } => (layers::dense_forward(&cur, weights, bias)?, None),
        };
        inputs.push(std::mem::replace(&mut cur, next));
        argmax.push(arg);
    }
    Ok(Trace { inputs, output: cur, argmax })
}

/// Reverse pass over a stack given the trace of its forward pass.
pub fn backward_stack<T: Scalar>(
    layers: &[Layer<T>],
    trace: &Trace<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Gradients<T>)> {
    if trace.inputs.len() != layers.len() {
        return Err(Error::NoForwardTrace(format!(
            "trace covers {} layers, stack has {}",
            trace.inputs.len(),
            layers.len()
        )));
    }
    if grad_out.len() != trace.output.len() {
        return Err(Error::NoForwardTrace(format!(
            "upstream gradient has {} values, forward output had {}",
            grad_out.len(),
            trace.output.len()
        )));
    }
    let mut grads: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; layers.len()];
    let mut g = grad_out.clone();
    for i in (0..layers.len()).rev() {
        let input = &trace.inputs[i];
        let need = need_input_grad || i > 0;
        let next = match &layers[i] {
            Layer::Conv { kernels, .. } => {
                let (gx, gk, gb) = layers::conv_backward(input, kernels, &g, need)?;
                grads[i] = Some((gk, gb));
                gx
            }
            Layer::Dense { weights, .. } => {
                let (gx, gw, gb) = layers::dense_backward(input, weights, &g, need)?;
                grads[i] = Some((gw, gb));
                gx
            }
            Layer::MaxPool { .. } => {
                let arg = trace.argmax[i]
                    .as_ref()
                    .ok_or_else(|| Error::NoForwardTrace(format!("layer {i}: no argmax map")))?;
                Some(layers::maxpool_backward(input.shape(), arg, &g)?)
            }
            Layer::AbsTanh => Some(layers::abstanh_backward(input, &g)?),
        };
        match next {
            Some(n) => g = n,
            None => break,
        }
    }
    let gx = if need_input_grad { Some(g) } else { None };
    Ok((gx, Gradients { layers: grads }))
}

/// Glorot-uniform weights, zero biases.
pub fn init_layers<T: Scalar, R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Vec<Layer<T>>> {
    build_layers(arch, |shape, fan_in, fan_out| glorot(shape, fan_in, fan_out, rng))
}

/// Layers with every parameter zero.
pub fn zero_layers<T: Scalar>(arch: &Architecture) -> Result<Vec<Layer<T>>> {
    build_layers(arch, |shape, _, _| Tensor::zeros(shape))
}

fn build_layers<T: Scalar>(
    arch: &Architecture,
    mut weights: impl FnMut(&[usize], usize, usize) -> Tensor<T>,
) -> Result<Vec<Layer<T>>> {
    let shapes = arch.shapes()?;
    let mut out = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let in_shape = &shapes[i];
        out.push(match *spec {
            LayerSpec::Conv { out_channels, kernel_h, kernel_w } => {
                let cin = in_shape[2];
                let fan_in = kernel_h * kernel_w * cin;
                let fan_out = kernel_h * kernel_w * out_channels;
                let shape = [out_channels, kernel_h, kernel_w, cin];
                Layer::Conv {
                    kernels: weights(&shape, fan_in, fan_out),
                    bias: Tensor::zeros(&[out_channels]),
                }
            }
            LayerSpec::Dense { units } => {
                let n: usize = in_shape.iter().product();
                Layer::Dense {
                    weights: weights(&[units, n], n, units),
                    bias: Tensor::zeros(&[units]),
                }
            }
            LayerSpec::Maxpool { window, stride } => Layer::MaxPool { window, stride },
            LayerSpec::Abstanh => Layer::AbsTanh,
        });
    }
    Ok(out)
}

fn glorot<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..=limit)))
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let layers = init_layers(&arch, rng)?;
        Ok(Self { arch, layers })
    }

    /// Builds a network from explicit layers, checking them against the architecture.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer<T>>) -> Result<Self> {
        let shapes = arch.shapes()?;
        if layers.len() != arch.layers.len() {
            return Err(Error::Shape(format!(
                "architecture has {} layers, {} given",
                arch.layers.len(),
                layers.len()
            )));
        }
        for (i, (spec, layer)) in arch.layers.iter().zip(&layers).enumerate() {
            let ok = match (spec, layer) {
                (LayerSpec::Conv { out_channels, kernel_h, kernel_w }, Layer::Conv { kernels, bias }) => {
                    kernels.shape() == [*out_channels, *kernel_h, *kernel_w, shapes[i][2]]
                        && bias.shape() == [*out_channels]
                }
                (LayerSpec::Dense { units }, Layer::Dense { weights, bias }) => {
                    weights.shape() == [*units, shapes[i].iter().product()] && bias.shape() == [*units]
                }
                (LayerSpec::Maxpool { window, stride }, Layer::MaxPool { window: w, stride: s }) => {
                    window == w && stride == s
                }
                (LayerSpec::Abstanh, Layer::AbsTanh) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("layer {i} does not match {spec:?}")));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        forward_stack(&self.layers, input)
    }

    pub fn forward_traced(&self, input: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(input)?;
        forward_stack_traced(&self.layers, input)
    }

    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Gradients<T>)> {
        let (gx, g) = backward_stack(&self.layers, trace, grad_out, true)?;
        Ok((gx.expect("input gradient requested"), g))
    }

    /// Flattened activation entering layer `tap_index`.
    pub fn features_at(&self, input: &Tensor<T>, tap_index: usize) -> Result<Tensor<T>> {
        self.check_input(input)?;
        Ok(forward_stack(&self.layers[..tap_index], input)?.flatten())
    }

    pub fn features(&self, input: &Tensor<T>, tap: &str) -> Result<Tensor<T>> {
        self.features_at(input, self.arch.tap_index(tap)?)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().filter_map(|l| l.params()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().filter_map(|l| l.params_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            layers: self.layers.iter().map(cast_layer).collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.arch.input_shape {
            return Err(Error::Shape(format!(
                "network expects input {:?}, found {:?}",
                self.arch.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }
}

pub(crate) fn cast_layer<T: Scalar, U: Scalar>(l: &Layer<T>) -> Layer<U> {
    match l {
        Layer::Conv { kernels, bias } => Layer::Conv { kernels: kernels.cast(), bias: bias.cast() },
        Layer::Dense { weights, bias } => Layer::Dense { weights: weights.cast(), bias: bias.cast() },
        Layer::MaxPool { window, stride } => Layer::MaxPool { window: *window, stride: *stride },
        Layer::AbsTanh => Layer::AbsTanh,
    }
}

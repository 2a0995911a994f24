//! Layer descriptions, parameter sets, and hand-written forward/backward
//! rules for every layer kind the model zoo needs.
//!
//! Tensors flowing through a graph carry a leading batch dimension. Spatial
//! tensors are `[batch, channels, height, width]`.

mod conv;
mod params;
mod pool;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

use conv::ConvGeom;
pub use params::{sgd_step, sgd_step_in_place, ParamSet};
pub use pool::{maxpool_forward, unpool_forward, PoolSwitches};

/// Shape parameters shared by convolution and transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 square kernel with "same" padding (`k` odd).
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: k / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Affine map `y = W x + b` over the flattened per-sample input.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d(ConvSpec),
    TransposedConv2d(ConvSpec),
    Relu,
    MaxPool2x2,
    /// Unpooling driven by externally supplied switches; `slot` indexes the
    /// switch list handed to the forward/backward call.
    Unpool2x2 {
        slot: usize,
    },
    Flatten,
    /// Reshapes a flat per-sample vector to `shape`.
    Unflatten {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::TransposedConv2d(_) => "transposed_conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Unpool2x2 { .. } => "unpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Unflatten { .. } => "unflatten",
        }
    }

    /// `(weight shape, bias shape)` for parametric layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![*outputs, *inputs], vec![*outputs])),
            LayerSpec::Conv2d(c) => Some((
                vec![c.out_channels, c.in_channels, c.kernel_h, c.kernel_w],
                vec![c.out_channels],
            )),
            LayerSpec::TransposedConv2d(c) => Some((
                vec![c.in_channels, c.out_channels, c.kernel_h, c.kernel_w],
                vec![c.out_channels],
            )),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv2d(c) | LayerSpec::TransposedConv2d(c) => c.in_channels * c.kernel_h * c.kernel_w,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let bad = |why: &str| Error::invalid(format!("{} layer cannot take input {input:?}: {why}", self.kind()));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if numel != *inputs {
                    return Err(bad(&format!("expects {inputs} features")));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d(c) => {
                let (ch, h, w) = chw(input).ok_or_else(|| bad("not [C, H, W]"))?;
                if ch != c.in_channels {
                    return Err(bad(&format!("expects {} channels", c.in_channels)));
                }
                let oh =
                    conv::conv_out(h, c.kernel_h, c.stride, c.padding).ok_or_else(|| bad("kernel does not fit"))?;
                let ow =
                    conv::conv_out(w, c.kernel_w, c.stride, c.padding).ok_or_else(|| bad("kernel does not fit"))?;
                Ok(vec![c.out_channels, oh, ow])
            }
            LayerSpec::TransposedConv2d(c) => {
                let (ch, h, w) = chw(input).ok_or_else(|| bad("not [C, H, W]"))?;
                if ch != c.in_channels || c.stride == 0 || c.kernel_h == 0 || c.kernel_w == 0 {
                    return Err(bad(&format!("expects {} channels", c.in_channels)));
                }
                let oh = conv::tconv_out(h, c.kernel_h, c.stride, c.padding).ok_or_else(|| bad("padding too large"))?;
                let ow = conv::tconv_out(w, c.kernel_w, c.stride, c.padding).ok_or_else(|| bad("padding too large"))?;
                Ok(vec![c.out_channels, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                let (ch, h, w) = chw(input).ok_or_else(|| bad("not [C, H, W]"))?;
                if h < 2 || w < 2 {
                    return Err(bad("smaller than the window"));
                }
                Ok(vec![ch, h / 2, w / 2])
            }
            LayerSpec::Unpool2x2 { .. } => {
                let (ch, h, w) = chw(input).ok_or_else(|| bad("not [C, H, W]"))?;
                Ok(vec![ch, 2 * h, 2 * w])
            }
            LayerSpec::Flatten => Ok(vec![numel]),
            LayerSpec::Unflatten { shape } => {
                if shape.iter().product::<usize>() != numel {
                    return Err(bad(&format!("cannot view as {shape:?}")));
                }
                Ok(shape.clone())
            }
        }
    }
}

fn chw(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

/// A validated chain of layers with its per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    param_slot: Vec<Option<usize>>,
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::invalid(format!("invalid graph input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut param_slot = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        let mut next_slot = 0;
        for layer in &layers {
            if let LayerSpec::Conv2d(c) | LayerSpec::TransposedConv2d(c) = layer {
                if c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0 {
                    return Err(Error::invalid("convolution kernel sizes and stride must be positive"));
                }
            }
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
            if layer.param_shapes().is_some() {
                param_slot.push(Some(next_slot));
                next_slot += 2;
            } else {
                param_slot.push(None);
            }
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            param_slot,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    /// `(name, shape)` of every parameter tensor, in [`ParamSet`] order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                out.push((format!("{i}.weight"), w));
                out.push((format!("{i}.bias"), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Number of parameter tensors (two per parametric layer).
    pub fn param_tensor_count(&self) -> usize {
        self.param_slot.iter().flatten().count() * 2
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                let bound = 1.0 / (layer.fan_in() as f64).sqrt();
                let weight = Tensor::from_fn(&w, |_| rng.gen_range(-bound..bound));
                p.push(format!("{i}.weight"), weight);
                p.push(format!("{i}.bias"), Tensor::zeros(&b));
            }
        }
        p
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "graph expects {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(params) {
            t.ensure_shape(shape, name)?;
        }
        Ok(())
    }

    fn batched(&self, batch: usize, per_sample: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(per_sample.len() + 1);
        s.push(batch);
        s.extend_from_slice(per_sample);
        s
    }
}

/// Every intermediate activation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// `outputs[i]` is the output of layer `i`.
    pub outputs: Vec<Tensor>,
    /// Switches for each max-pool layer, `None` elsewhere.
    pub switches: Vec<Option<PoolSwitches>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Input of layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

pub fn forward(graph: &ModelGraph, params: &ParamSet, x: &Tensor) -> Result<ForwardTrace> {
    forward_with(graph, params.tensors(), x, &[])
}

/// Forward pass with externally supplied unpooling switches.
pub fn forward_with(graph: &ModelGraph, params: &[Tensor], x: &Tensor, ext: &[&PoolSwitches]) -> Result<ForwardTrace> {
    graph.check_params(params)?;
    if x.shape().len() != graph.input_shape.len() + 1 || &x.shape()[1..] != graph.input_shape() {
        let want = graph.batched(x.shape().first().copied().unwrap_or(0), &graph.input_shape);
        return Err(Error::shape("forward input", &want, x.shape()));
    }
    let batch = x.batch();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
    let mut switches = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let input = if i == 0 { x } else { &outputs[i - 1] };
        let out_shape = graph.batched(batch, &graph.shapes[i]);
        let mut sw = None;
        let out = match layer {
            LayerSpec::Dense { inputs, outputs: n_out } => {
                let (w, b) = layer_params(graph, params, i);
                let mut y = vec![0.0; batch * n_out];
                for row in y.chunks_mut(*n_out) {
                    row.copy_from_slice(b.data());
                }
                gemm(
                    batch,
                    *inputs,
                    *n_out,
                    1.0,
                    input.data(),
                    false,
                    w.data(),
                    true,
                    1.0,
                    &mut y,
                );
                Tensor::new(out_shape, y)?
            }
            LayerSpec::Conv2d(c) => {
                let (w, b) = layer_params(graph, params, i);
                let g = conv_geom(c, graph.layer_input_shape(i), &graph.shapes[i]);
                let mut y = vec![0.0; out_shape.iter().product()];
                conv::conv_forward(input.data(), batch, &g, w.data(), b.data(), c.out_channels, &mut y);
                Tensor::new(out_shape, y)?
            }
            LayerSpec::TransposedConv2d(c) => {
                let (w, b) = layer_params(graph, params, i);
                let g = tconv_geom(c, graph.layer_input_shape(i), &graph.shapes[i]);
                let mut y = vec![0.0; out_shape.iter().product()];
                conv::tconv_forward(input.data(), batch, &g, w.data(), b.data(), c.in_channels, &mut y);
                Tensor::new(out_shape, y)?
            }
            LayerSpec::Relu => input.map(|v| v.max(0.0)),
            LayerSpec::MaxPool2x2 => {
                let (y, s) = maxpool_forward(input)?;
                sw = Some(s);
                y
            }
            LayerSpec::Unpool2x2 { slot } => {
                let s = ext
                    .get(*slot)
                    .ok_or_else(|| Error::invalid(format!("unpool layer {i} needs switch slot {slot}")))?;
                let y = unpool_forward(input, s)?;
                y.ensure_shape(&out_shape, "unpool output")?;
                y
            }
            LayerSpec::Flatten | LayerSpec::Unflatten { .. } => input.clone().reshape(&out_shape)?,
        };
        out.ensure_finite(&format!("output of layer {i} ({})", layer.kind()))?;
        outputs.push(out);
        switches.push(sw);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        outputs,
        switches,
    })
}

fn layer_params<'a>(graph: &ModelGraph, params: &'a [Tensor], i: usize) -> (&'a Tensor, &'a Tensor) {
    let s = graph.param_slot[i].expect("parametric layer has a slot");
    (&params[s], &params[s + 1])
}

fn conv_geom(c: &ConvSpec, input: &[usize], output: &[usize]) -> ConvGeom {
    ConvGeom {
        channels: input[0],
        height: input[1],
        width: input[2],
        kernel_h: c.kernel_h,
        kernel_w: c.kernel_w,
        stride: c.stride,
        padding: c.padding,
        out_h: output[1],
        out_w: output[2],
    }
}

/// Geometry of the convolution whose adjoint is this transposed convolution.
fn tconv_geom(c: &ConvSpec, input: &[usize], output: &[usize]) -> ConvGeom {
    ConvGeom {
        channels: output[0],
        height: output[1],
        width: output[2],
        kernel_h: c.kernel_h,
        kernel_w: c.kernel_w,
        stride: c.stride,
        padding: c.padding,
        out_h: input[1],
        out_w: input[2],
    }
}

/// Gradients produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    /// Gradient with respect to the graph input, when requested.
    pub input: Option<Tensor>,
}

/// Backward pass of a scalar loss whose gradient with respect to the graph
/// output is `output_grad`.
pub fn backward(
    graph: &ModelGraph,
    params: &ParamSet,
    trace: &ForwardTrace,
    output_grad: &Tensor,
) -> Result<(ParamSet, Tensor)> {
    let mut injections = vec![None; graph.layers.len()];
    let g = backward_with(
        graph,
        params.tensors(),
        trace,
        Some(output_grad.clone()),
        &mut injections,
        &[],
        true,
    )?;
    let mut out = ParamSet::new();
    for ((name, _), t) in graph.param_layout().into_iter().zip(g.params) {
        out.push(name, t);
    }
    Ok((out, g.input.expect("input gradient requested")))
}

/// General backward pass.
///
/// `injections[i]`, when present, is an extra gradient arriving at the
/// output of layer `i` from outside the chain (e.g. an auxiliary loss on an
/// intermediate activation). It is consumed. `ext` must match the switches
/// given to [`forward_with`].
pub fn backward_with(
    graph: &ModelGraph,
    params: &[Tensor],
    trace: &ForwardTrace,
    output_grad: Option<Tensor>,
    injections: &mut [Option<Tensor>],
    ext: &[&PoolSwitches],
    need_input_grad: bool,
) -> Result<Gradients> {
    graph.check_params(params)?;
    let n = graph.layers.len();
    if trace.outputs.len() != n || injections.len() != n {
        return Err(Error::invalid(format!(
            "trace has {} layers and {} injections, graph has {n}",
            trace.outputs.len(),
            injections.len()
        )));
    }
    let batch = trace.input.batch();
    let mut grads: Vec<Tensor> = graph.param_layout().iter().map(|(_, s)| Tensor::zeros(s)).collect();

    let mut cur = output_grad;
    if let Some(g) = &cur {
        g.ensure_shape(trace.output().shape(), "output gradient")?;
    }
    for i in (0..n).rev() {
        cur = add_grad(cur, injections[i].take(), trace.outputs[i].shape())?;
        let Some(dy) = cur.take() else {
            continue;
        };
        let want_dx = i > 0 || need_input_grad;
        let x = trace.layer_input(i);
        let in_shape = x.shape().to_vec();
        let layer = &graph.layers[i];
        let dx = match layer {
            LayerSpec::Dense { inputs, outputs } => {
                let s = graph.param_slot[i].expect("slot");
                let w = &params[s];
                let (dw, rest) = grads[s..].split_at_mut(1);
                gemm(
                    *outputs,
                    batch,
                    *inputs,
                    1.0,
                    dy.data(),
                    true,
                    x.data(),
                    false,
                    1.0,
                    dw[0].data_mut(),
                );
                let db = rest[0].data_mut();
                for row in dy.data().chunks(*outputs) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                if want_dx {
                    let mut dx = vec![0.0; batch * inputs];
                    gemm(
                        batch,
                        *outputs,
                        *inputs,
                        1.0,
                        dy.data(),
                        false,
                        w.data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    Some(Tensor::new(in_shape, dx)?)
                } else {
                    None
                }
            }
            LayerSpec::Conv2d(c) => {
                let s = graph.param_slot[i].expect("slot");
                let g = conv_geom(c, graph.layer_input_shape(i), &graph.shapes[i]);
                let (dw, rest) = grads[s..].split_at_mut(1);
                let mut dx = want_dx.then(|| vec![0.0; x.len()]);
                conv::conv_backward(
                    x.data(),
                    batch,
                    &g,
                    params[s].data(),
                    c.out_channels,
                    dy.data(),
                    dw[0].data_mut(),
                    rest[0].data_mut(),
                    dx.as_deref_mut(),
                );
                dx.map(|d| Tensor::new(in_shape, d)).transpose()?
            }
            LayerSpec::TransposedConv2d(c) => {
                let s = graph.param_slot[i].expect("slot");
                let g = tconv_geom(c, graph.layer_input_shape(i), &graph.shapes[i]);
                let (dw, rest) = grads[s..].split_at_mut(1);
                let mut dx = want_dx.then(|| vec![0.0; x.len()]);
                conv::tconv_backward(
                    x.data(),
                    batch,
                    &g,
                    params[s].data(),
                    c.in_channels,
                    dy.data(),
                    dw[0].data_mut(),
                    rest[0].data_mut(),
                    dx.as_deref_mut(),
                );
                dx.map(|d| Tensor::new(in_shape, d)).transpose()?
            }
            LayerSpec::Relu => want_dx.then(|| {
                let mut d = dy;
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                d
            }),
            LayerSpec::MaxPool2x2 => {
                let sw = trace.switches[i]
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("trace lacks switches for layer {i}")))?;
                want_dx.then(|| pool::maxpool_backward(&dy, sw)).transpose()?
            }
            LayerSpec::Unpool2x2 { slot } => {
                let sw = ext
                    .get(*slot)
                    .ok_or_else(|| Error::invalid(format!("unpool layer {i} needs switch slot {slot}")))?;
                want_dx.then(|| pool::unpool_backward(&dy, sw)).transpose()?
            }
            LayerSpec::Flatten | LayerSpec::Unflatten { .. } => want_dx.then(|| dy.reshape(&in_shape)).transpose()?,
        };
        cur = dx;
    }
    Ok(Gradients {
        params: grads,
        input: if need_input_grad {
            Some(cur.unwrap_or_else(|| Tensor::zeros(trace.input.shape())))
        } else {
            None
        },
    })
}

fn add_grad(a: Option<Tensor>, b: Option<Tensor>, shape: &[usize]) -> Result<Option<Tensor>> {
    if let Some(t) = &b {
        t.ensure_shape(shape, "injected gradient")?;
    }
    Ok(match (a, b) {
        (Some(mut a), Some(b)) => {
            a.axpy(1.0, &b)?;
            Some(a)
        }
        (a, b) => a.or(b),
    })
}

#[cfg(test)]
mod tests;

//! Ordered layer graph with forward and reverse-mode execution.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{Layer, LayerKind, Param, Source};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Pool2d};
use crate::scalar::Scalar;
use crate::seed::mix;
use crate::tensor::{shape_str, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter name to gradient tensor.
pub type GradientSet<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: GradientSet<T>,
    /// Gradient with respect to the graph input, when requested.
    pub input: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Mask(Vec<T>),
    PoolIndex(Vec<usize>),
}

/// Everything backward needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    mode: Mode,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.input.batch()
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn activation(&self, layer: usize) -> &Tensor<T> {
        &self.outputs[layer]
    }

    /// Dropout keep-mask of a layer (scaled values), if one was drawn.
    pub fn dropout_mask(&self, layer: usize) -> Option<&[T]> {
        match &self.aux[layer] {
            Aux::Mask(m) => Some(m),
            _ => None,
        }
    }

    pub fn pool_indices(&self, layer: usize) -> Option<&[usize]> {
        match &self.aux[layer] {
            Aux::PoolIndex(m) => Some(m),
            _ => None,
        }
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

/// Ordered computation graph; layer `i` may only read outputs of layers `< i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
}

fn layer_err(index: usize, name: &str, message: impl Into<String>) -> Error {
    Error::Layer {
        index,
        name: name.to_string(),
        message: message.into(),
    }
}

fn resolve(i: usize, src: Source) -> Option<usize> {
    match src {
        Source::Previous => i.checked_sub(1),
        Source::GraphInput => None,
        Source::Layer(j) => Some(j),
    }
}

fn conv_geometry(kind: &LayerKind, shape: &[usize]) -> Option<ConvGeometry> {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            kernel,
            stride,
            padding,
            ..
        } => Some(ConvGeometry {
            in_channels,
            height: shape[1],
            width: shape[2],
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }),
        _ => None,
    }
}

fn infer_shape(kind: &LayerKind, input: &[usize], skip: Option<&[usize]>) -> std::result::Result<Vec<usize>, String> {
    let rank3 = |what: &str| -> std::result::Result<(), String> {
        if input.len() == 3 {
            Ok(())
        } else {
            Err(format!("{what} needs C×H×W input, got {}", shape_str(input)))
        }
    };
    match *kind {
        LayerKind::Dense { inputs, units } => {
            if input != [inputs] {
                return Err(format!("dense expects [{inputs}], got {}", shape_str(input)));
            }
            if units == 0 {
                return Err("dense needs at least one unit".into());
            }
            Ok(vec![units])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            ..
        } => {
            rank3("conv2d")?;
            if input[0] != in_channels {
                return Err(format!("conv2d expects {in_channels} channels, got {}", input[0]));
            }
            let g = conv_geometry(kind, input).expect("conv kind");
            let (oh, ow) = g.output_hw().map_err(|e| e.to_string())?;
            Ok(vec![out_channels, oh, ow])
        }
        LayerKind::MaxPool {
            window,
            stride,
            padding,
        } => {
            rank3("max_pool")?;
            let pool = Pool2d {
                window,
                stride,
                padding,
            };
            let (oh, ow) = pool.output_hw(input[1], input[2]).map_err(|e| e.to_string())?;
            Ok(vec![input[0], oh, ow])
        }
        LayerKind::GlobalAvgPool => {
            rank3("global_avg_pool")?;
            Ok(vec![input[0]])
        }
        LayerKind::BatchNormFrozen { channels, epsilon } => {
            if !(input.len() == 1 || input.len() == 3) || input[0] != channels {
                return Err(format!(
                    "batch_norm expects {channels} leading channels, got {}",
                    shape_str(input)
                ));
            }
            if epsilon <= 0.0 {
                return Err("batch_norm epsilon must be positive".into());
            }
            Ok(input.to_vec())
        }
        LayerKind::ResidualAdd { .. } => match skip {
            Some(s) if s == input => Ok(input.to_vec()),
            Some(s) => Err(format!(
                "residual_add branches differ: {} vs {}",
                shape_str(input),
                shape_str(s)
            )),
            None => Err("residual_add skip source unresolved".into()),
        },
        LayerKind::Relu | LayerKind::Tanh => Ok(input.to_vec()),
        LayerKind::Dropout { rate } => {
            if (0.0..1.0).contains(&rate) {
                Ok(input.to_vec())
            } else {
                Err(format!("dropout rate {rate} outside [0, 1)"))
            }
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Softmax => {
            if input.len() == 1 {
                Ok(input.to_vec())
            } else {
                Err(format!("softmax expects a vector, got {}", shape_str(input)))
            }
        }
    }
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn new(input_shape: Vec<usize>, mut layers: Vec<Layer<T>>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("invalid graph input shape {}", shape_str(&input_shape))));
        }
        // Canonical sources, so equal topologies compare equal however built.
        for (i, layer) in layers.iter_mut().enumerate() {
            let canon = |src: Source| match resolve(i, src) {
                None => Source::GraphInput,
                Some(j) => Source::Layer(j),
            };
            if resolve(i, layer.source) == i.checked_sub(1) {
                layer.source = Source::Previous;
            }
            if let LayerKind::ResidualAdd { skip } = layer.kind {
                layer.kind = LayerKind::ResidualAdd { skip: canon(skip) };
            }
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut names = HashSet::new();
        let mut layer_names = HashSet::new();
        for (i, layer) in layers.iter().enumerate() {
            if !layer_names.insert(layer.name.as_str()) {
                return Err(layer_err(i, &layer.name, "duplicate layer name"));
            }
            let shape_of = |src: Option<usize>| -> Result<&[usize]> {
                match src {
                    None => Ok(&input_shape),
                    Some(j) if j < i => Ok(&shapes[j]),
                    Some(j) => Err(layer_err(i, &layer.name, format!("reads layer {j}, which is not earlier"))),
                }
            };
            let input = shape_of(resolve(i, layer.source))?;
            let skip = match layer.kind {
                LayerKind::ResidualAdd { skip } => Some(shape_of(resolve(i, skip))?),
                _ => None,
            };
            if matches!(layer.kind, LayerKind::Softmax) && i + 1 != layers.len() {
                return Err(layer_err(i, &layer.name, "softmax must be the final layer"));
            }
            let out = infer_shape(&layer.kind, input, skip).map_err(|m| layer_err(i, &layer.name, m))?;
            let expected = layer.kind.param_shapes();
            if expected.len() != layer.params.len() {
                return Err(layer_err(i, &layer.name, "parameter list does not match layer kind"));
            }
            for ((role, shape), p) in expected.iter().zip(&layer.params) {
                if p.role != *role || p.value.shape() != &shape[..] {
                    return Err(layer_err(
                        i,
                        &layer.name,
                        format!("parameter {} has shape {}, expected {}", p.name, shape_str(p.value.shape()), shape_str(shape)),
                    ));
                }
                if !names.insert(p.name.clone()) {
                    return Err(layer_err(i, &layer.name, format!("parameter {} owned twice", p.name)));
                }
            }
            shapes.push(out);
        }
        Ok(NetworkGraph {
            input_shape,
            layers,
            shapes,
        })
    }

    /// A graph with no layers; forward returns its input.
    pub fn identity(input_shape: Vec<usize>) -> Result<Self> {
        Self::new(input_shape, Vec::new())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap_or(&self.input_shape)
    }

    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn set_trainable(&mut self, layer: usize, trainable: bool) {
        self.layers[layer].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.trainable = false);
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    /// Replaces a parameter by full name (`layer/role`), checking its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let (layer, role) = name.rsplit_once('/').ok_or_else(|| Error::Parameter {
            name: name.into(),
            message: "expected `layer/role`".into(),
        })?;
        let idx = self.layer_index(layer).ok_or_else(|| Error::Parameter {
            name: name.into(),
            message: "no such layer".into(),
        })?;
        self.layers[idx].set_param(role, value)
    }

    /// Mutable access to a parameter's values; shape cannot change.
    pub fn param_data_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .find(|p| p.name == name)
            .map(|p| p.value.data_mut())
    }

    fn is_trainable_param(layer: &Layer<T>, p: &Param<T>) -> bool {
        layer.trainable && layer.kind.is_trainable_role(p.role)
    }

    pub fn trainable_param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().filter(move |p| Self::is_trainable_param(l, p)))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Parameters the optimizer may update, in graph order.
    pub fn trainable_params_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if !layer.trainable {
                continue;
            }
            let kind = &layer.kind;
            for p in &mut layer.params {
                if kind.is_trainable_role(p.role) {
                    out.push((p.name.as_str(), &mut p.value));
                }
            }
        }
        out
    }

    /// CRC32 over names and `f32` bytes of the parameters selected by `keep`.
    pub fn checksum(&self, keep: impl Fn(&Layer<T>, &Param<T>) -> bool) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for l in &self.layers {
            for p in l.params.iter().filter(|p| keep(l, p)) {
                h.update(p.name.as_bytes());
                for &v in p.value.data() {
                    h.update(&v.to_f32_le());
                }
            }
        }
        h.finalize()
    }

    /// Checksum of every parameter the optimizer must never touch.
    pub fn frozen_checksum(&self) -> u32 {
        self.checksum(|l, p| !Self::is_trainable_param(l, p))
    }

    pub fn weight_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_weight_layer())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                kind: l.kind.clone(),
                source: l.source,
                trainable: l.trainable,
                block: l.block.clone(),
                params: l
                    .params
                    .iter()
                    .map(|p| Param {
                        role: p.role,
                        name: p.name.clone(),
                        value: p.value.cast(),
                    })
                    .collect(),
            })
            .collect();
        NetworkGraph {
            input_shape: self.input_shape.clone(),
            layers,
            shapes: self.shapes.clone(),
        }
    }

    /// Sub-graph of layers `range`; references to the layer just before the
    /// range become references to the new graph input.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        let start = range.start;
        let input_shape = if start == 0 {
            self.input_shape.clone()
        } else {
            self.shapes[start - 1].clone()
        };
        let remap = |i: usize, src: Source| -> Result<Source> {
            match resolve(i, src) {
                None if start == 0 => Ok(Source::GraphInput),
                None => Err(Error::Validation(format!(
                    "layer {i} reads the original graph input, outside the slice from {start}"
                ))),
                Some(j) if j + 1 == start => Ok(Source::GraphInput),
                Some(_) if matches!(src, Source::Previous) => Ok(Source::Previous),
                Some(j) if j >= start => Ok(Source::Layer(j - start)),
                Some(j) => Err(Error::Validation(format!(
                    "layer {i} reads layer {j}, before the slice start {start}"
                ))),
            }
        };
        let mut layers = Vec::with_capacity(range.len());
        for i in range {
            let mut layer = self.layers[i].clone();
            layer.source = remap(i, layer.source)?;
            if let LayerKind::ResidualAdd { skip } = layer.kind {
                layer.kind = LayerKind::ResidualAdd { skip: remap(i, skip)? };
            }
            layers.push(layer);
        }
        Self::new(input_shape, layers)
    }

    /// Composition `next ∘ self`: `next`'s input becomes this graph's output.
    pub fn then(&self, next: &NetworkGraph<T>) -> Result<Self> {
        if next.input_shape() != self.output_shape() {
            return Err(Error::dim(format!(
                "cannot chain output {} into input {}",
                shape_str(self.output_shape()),
                shape_str(next.input_shape())
            )));
        }
        let offset = self.layers.len();
        let map = |src: Source| match src {
            Source::Previous => Source::Previous,
            Source::GraphInput if offset == 0 => Source::GraphInput,
            Source::GraphInput => Source::Layer(offset - 1),
            Source::Layer(j) => Source::Layer(j + offset),
        };
        let mut layers = self.layers.clone();
        for l in &next.layers {
            let mut l = l.clone();
            l.source = map(l.source);
            if let LayerKind::ResidualAdd { skip } = l.kind {
                l.kind = LayerKind::ResidualAdd { skip: map(skip) };
            }
            layers.push(l);
        }
        Self::new(self.input_shape.clone(), layers)
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.ndim() < 2 || batch.sample_shape() != &self.input_shape[..] {
            let name = self.layers.first().map(|l| l.name.as_str()).unwrap_or("input");
            return Err(layer_err(
                0,
                name,
                format!(
                    "batch shape {} does not match graph input B×{}",
                    shape_str(batch.shape()),
                    shape_str(&self.input_shape)
                ),
            ));
        }
        Ok(())
    }

    fn batched_shape(&self, b: usize, i: usize) -> Vec<usize> {
        let mut s = vec![b];
        s.extend_from_slice(&self.shapes[i]);
        s
    }

    fn layer_forward(
        &self,
        i: usize,
        x: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let layer = &self.layers[i];
        let b = x.batch();
        let out_shape = self.batched_shape(b, i);
        let in_shape = x.sample_shape();
        let mut aux = Aux::None;
        let data: Vec<T> = match layer.kind {
            LayerKind::Dense { inputs, units } => {
                let w = layer.params[0].value.data();
                let bias = layer.params[1].value.data();
                let mut out = vec![T::zero(); b * units];
                kernels::gemm(x.data(), w, b, inputs, units, &mut out);
                for row in out.chunks_mut(units) {
                    for (o, &bv) in row.iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
                out
            }
            LayerKind::Conv2d { out_channels, .. } => {
                let g = conv_geometry(&layer.kind, in_shape).expect("conv");
                let w = layer.params[0].value.data();
                let bias = layer.params.get(1).map(|p| p.value.data());
                let per = out_shape[1..].iter().product::<usize>();
                let mut out = vec![T::zero(); b * per];
                for s in 0..b {
                    kernels::conv2d_forward_raw(x.sample(s), w, bias, out_channels, &g, &mut out[s * per..(s + 1) * per])?;
                }
                out
            }
            LayerKind::MaxPool {
                window,
                stride,
                padding,
            } => {
                let pool = Pool2d {
                    window,
                    stride,
                    padding,
                };
                let per = out_shape[1..].iter().product::<usize>();
                let mut out = vec![T::zero(); b * per];
                let mut idx = vec![0usize; b * per];
                for s in 0..b {
                    kernels::max_pool_raw(
                        x.sample(s),
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        &pool,
                        &mut out[s * per..(s + 1) * per],
                        &mut idx[s * per..(s + 1) * per],
                    )?;
                }
                aux = Aux::PoolIndex(idx);
                out
            }
            LayerKind::GlobalAvgPool => {
                let c = in_shape[0];
                let plane = in_shape[1] * in_shape[2];
                let mut out = vec![T::zero(); b * c];
                for s in 0..b {
                    kernels::global_avg_pool_raw(x.sample(s), c, plane, &mut out[s * c..(s + 1) * c]);
                }
                out
            }
            LayerKind::BatchNormFrozen { channels, epsilon } => {
                let (scale, shift) = bn_affine(layer, epsilon);
                let plane = in_shape.iter().product::<usize>() / channels;
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let c = (k / plane) % channels;
                        (v - shift[c]) * scale[c] + layer.params[1].value.data()[c]
                    })
                    .collect()
            }
            LayerKind::ResidualAdd { .. } => {
                let s = skip.expect("skip resolved");
                x.data().iter().zip(s.data()).map(|(&a, &c)| a + c).collect()
            }
            LayerKind::Relu => x.data().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect(),
            LayerKind::Tanh => x.data().iter().map(|&v| v.tanh()).collect(),
            LayerKind::Dropout { rate } => {
                if mode == Mode::Train && rate > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
                    let keep = T::lit(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                        .collect();
                    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    aux = Aux::Mask(mask);
                    out
                } else {
                    x.data().to_vec()
                }
            }
            LayerKind::Flatten => x.data().to_vec(),
            LayerKind::Softmax => {
                let n = in_shape[0];
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(n) {
                    softmax_in_place(row);
                }
                out
            }
        };
        Ok((Tensor::new(out_shape, data)?, aux))
    }

    fn run(&self, batch: &Tensor<T>, mode: Mode, seed: u64, keep_all: bool) -> Result<(Vec<Option<Tensor<T>>>, Vec<Aux<T>>)> {
        self.check_input(batch)?;
        let n = self.layers.len();
        let mut last_use = vec![0usize; n];
        for i in 0..n {
            if let Some(j) = resolve(i, self.layers[i].source) {
                last_use[j] = last_use[j].max(i);
            }
            if let LayerKind::ResidualAdd { skip } = self.layers[i].kind {
                if let Some(j) = resolve(i, skip) {
                    last_use[j] = last_use[j].max(i);
                }
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        for i in 0..n {
            let layer = &self.layers[i];
            let (y, a) = {
                let fetch = |src: Option<usize>| -> &Tensor<T> {
                    match src {
                        None => batch,
                        Some(j) => outputs[j].as_ref().expect("activation retained"),
                    }
                };
                let x = fetch(resolve(i, layer.source));
                let skip = match layer.kind {
                    LayerKind::ResidualAdd { skip } => Some(fetch(resolve(i, skip))),
                    _ => None,
                };
                self.layer_forward(i, x, skip, mode, seed).map_err(|e| match e {
                    Error::Layer { .. } => e,
                    other => layer_err(i, &layer.name, other.to_string()),
                })?
            };
            outputs.push(Some(y));
            aux.push(if keep_all { a } else { Aux::None });
            if !keep_all {
                for j in 0..i {
                    if last_use[j] <= i && j + 1 != n {
                        outputs[j] = None;
                    }
                }
            }
        }
        Ok((outputs, aux))
    }

    /// Full forward pass keeping every activation for backward.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, seed: u64) -> Result<(ForwardTrace<T>, Tensor<T>)> {
        let (outputs, aux) = self.run(batch, mode, seed, true)?;
        let outputs: Vec<Tensor<T>> = outputs.into_iter().map(|o| o.expect("kept")).collect();
        let out = outputs.last().cloned().unwrap_or_else(|| batch.clone());
        Ok((
            ForwardTrace {
                input: batch.clone(),
                outputs,
                aux,
                mode,
            },
            out,
        ))
    }

    /// Eval-mode forward that frees activations as soon as they are consumed.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut outputs, _) = self.run(batch, Mode::Eval, 0, false)?;
        Ok(outputs
            .pop()
            .flatten()
            .unwrap_or_else(|| batch.clone()))
    }

    fn check_trace(&self, trace: &ForwardTrace<T>) -> Result<()> {
        if trace.outputs.len() != self.layers.len() {
            return Err(Error::Validation(format!(
                "trace has {} layers, graph has {}",
                trace.outputs.len(),
                self.layers.len()
            )));
        }
        let b = trace.batch_size();
        for (i, o) in trace.outputs.iter().enumerate() {
            if o.shape() != &self.batched_shape(b, i)[..] {
                return Err(Error::Validation(format!(
                    "trace activation {i} has shape {}, graph expects {}",
                    shape_str(o.shape()),
                    shape_str(&self.batched_shape(b, i))
                )));
            }
        }
        if trace.input.sample_shape() != &self.input_shape[..] {
            return Err(Error::Validation("trace input does not match graph input".into()));
        }
        Ok(())
    }

    /// Backward pass of softmax + mean cross-entropy against `labels`
    /// (`B×classes`), fused as `(p − y)/B` at the logits.
    pub fn backward(&self, trace: &ForwardTrace<T>, labels: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_labels(trace, labels, true)
    }

    /// As [`backward`](Self::backward) without the input gradient.
    pub fn backward_params(&self, trace: &ForwardTrace<T>, labels: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_labels(trace, labels, false)
    }

    fn backward_labels(&self, trace: &ForwardTrace<T>, labels: &Tensor<T>, want_input: bool) -> Result<Gradients<T>> {
        self.check_trace(trace)?;
        let last = self
            .layers
            .len()
            .checked_sub(1)
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Softmax))
            .ok_or_else(|| Error::Validation("label backward needs a final softmax layer".into()))?;
        let probs = &trace.outputs[last];
        if labels.shape() != probs.shape() {
            return Err(Error::dim(format!(
                "labels {} vs predictions {}",
                shape_str(labels.shape()),
                shape_str(probs.shape())
            )));
        }
        let inv_b = T::one() / T::lit(trace.batch_size() as f64);
        let g_logits = probs.zip_map(labels, |p, y| (p - y) * inv_b)?;
        self.backward_impl(trace, last, g_logits, want_input)
    }

    /// Backward pass from an explicit gradient of the graph output.
    pub fn backward_from_output(&self, trace: &ForwardTrace<T>, grad_output: &Tensor<T>, want_input: bool) -> Result<Gradients<T>> {
        self.check_trace(trace)?;
        if grad_output.shape() != trace.output().shape() {
            return Err(Error::dim("output gradient shape mismatch"));
        }
        if self.layers.is_empty() {
            return Ok(Gradients {
                params: BTreeMap::new(),
                input: want_input.then(|| grad_output.clone()),
            });
        }
        let n = self.layers.len();
        let mut grads = vec![None; n];
        grads[n - 1] = Some(grad_output.clone());
        self.propagate(trace, grads, n, want_input)
    }

    /// `g_in` is the gradient flowing into the *input* of layer `from`; the
    /// layer itself is skipped.
    fn backward_impl(&self, trace: &ForwardTrace<T>, from: usize, g_in: Tensor<T>, want_input: bool) -> Result<Gradients<T>> {
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut input_grad: Option<Tensor<T>> = None;
        match resolve(from, self.layers[from].source) {
            Some(j) => grads[j] = Some(g_in),
            None => input_grad = Some(g_in),
        }
        let mut out = self.propagate(trace, grads, from, want_input)?;
        if let Some(g) = input_grad {
            if want_input {
                match &mut out.input {
                    Some(acc) => acc.add_assign(&g)?,
                    None => out.input = Some(g),
                }
            }
        }
        Ok(out)
    }

    fn requires_grad(&self, want_input: bool) -> Vec<bool> {
        let n = self.layers.len();
        let mut req = vec![false; n];
        for i in 0..n {
            let layer = &self.layers[i];
            let from = |src: Source| resolve(i, src).map_or(want_input, |j| req[j]);
            let mut r = layer.trainable && !layer.params.is_empty() || from(layer.source);
            if let LayerKind::ResidualAdd { skip } = layer.kind {
                r |= from(skip);
            }
            req[i] = r;
        }
        req
    }

    /// Reverse sweep over layers `< upto`.
    fn propagate(&self, trace: &ForwardTrace<T>, mut grads: Vec<Option<Tensor<T>>>, upto: usize, want_input: bool) -> Result<Gradients<T>> {
        let req = self.requires_grad(want_input);
        let needs = |src: Option<usize>| src.map_or(want_input, |j| req[j]);
        let mut params = BTreeMap::new();
        let mut input_grad: Option<Tensor<T>> = None;
        for i in (0..upto).rev() {
            let Some(g) = grads[i].take() else { continue };
            let layer = &self.layers[i];
            let src = resolve(i, layer.source);
            let x = src.map_or(&trace.input, |j| &trace.outputs[j]);
            let y = &trace.outputs[i];
            let want_x = needs(src);
            let (gx, skip_grad) = self.layer_backward(i, x, y, &g, &trace.aux[i], want_x, &mut params)?;
            let mut route = |target: Option<usize>, gt: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
                let slot = match target {
                    Some(j) => &mut grads[j],
                    None => &mut input_grad,
                };
                match slot {
                    Some(acc) => acc.add_assign(&gt)?,
                    None => *slot = Some(gt),
                }
                Ok(())
            };
            if let Some(gx) = gx {
                route(src, gx, &mut grads)?;
            }
            if let (Some(gs), LayerKind::ResidualAdd { skip }) = (skip_grad, &layer.kind) {
                let s = resolve(i, *skip);
                if needs(s) {
                    route(s, gs, &mut grads)?;
                }
            }
        }
        Ok(Gradients {
            params,
            input: if want_input { input_grad } else { None },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        i: usize,
        x: &Tensor<T>,
        y: &Tensor<T>,
        g: &Tensor<T>,
        aux: &Aux<T>,
        want_x: bool,
        params: &mut GradientSet<T>,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let layer = &self.layers[i];
        let b = x.batch();
        let in_shape = x.sample_shape();
        let emit = layer.trainable;
        let like_x = |data: Vec<T>| Tensor::new(x.shape().to_vec(), data);
        let gx = match layer.kind {
            LayerKind::Dense { inputs, units } => {
                let w = layer.params[0].value.data();
                if emit {
                    let mut gw = vec![T::zero(); inputs * units];
                    kernels::gemm_tn(x.data(), g.data(), b, inputs, units, &mut gw);
                    let mut gb = vec![T::zero(); units];
                    for row in g.data().chunks(units) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    params.insert(layer.params[0].name.clone(), Tensor::new(vec![inputs, units], gw)?);
                    params.insert(layer.params[1].name.clone(), Tensor::new(vec![units], gb)?);
                }
                if want_x {
                    let mut gx = vec![T::zero(); b * inputs];
                    kernels::gemm_nt(g.data(), w, b, units, inputs, &mut gx);
                    Some(like_x(gx)?)
                } else {
                    None
                }
            }
            LayerKind::Conv2d { out_channels, .. } => {
                let geo = conv_geometry(&layer.kind, in_shape).expect("conv");
                let w = &layer.params[0].value;
                let mut gw = emit.then(|| vec![T::zero(); w.len()]);
                let has_bias = layer.params.len() > 1;
                let mut gb = (emit && has_bias).then(|| vec![T::zero(); out_channels]);
                let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
                let per_in = x.len() / b;
                for s in 0..b {
                    kernels::conv2d_backward_raw(
                        x.sample(s),
                        w.data(),
                        g.sample(s),
                        out_channels,
                        &geo,
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                        gx.as_mut().map(|v| &mut v[s * per_in..(s + 1) * per_in]),
                    )?;
                }
                if let Some(gw) = gw {
                    params.insert(layer.params[0].name.clone(), Tensor::new(w.shape().to_vec(), gw)?);
                }
                if let Some(gb) = gb {
                    params.insert(layer.params[1].name.clone(), Tensor::new(vec![out_channels], gb)?);
                }
                gx.map(like_x).transpose()?
            }
            LayerKind::MaxPool { .. } => {
                if want_x {
                    let Aux::PoolIndex(idx) = aux else {
                        return Err(Error::Validation(format!("layer {i}: trace lacks pool indices")));
                    };
                    let per_out = g.len() / b;
                    let per_in = x.len() / b;
                    let mut gx = vec![T::zero(); x.len()];
                    for s in 0..b {
                        for o in 0..per_out {
                            gx[s * per_in + idx[s * per_out + o]] += g.data()[s * per_out + o];
                        }
                    }
                    Some(like_x(gx)?)
                } else {
                    None
                }
            }
            LayerKind::GlobalAvgPool => {
                if want_x {
                    let c = in_shape[0];
                    let plane = in_shape[1] * in_shape[2];
                    let inv = T::one() / T::lit(plane as f64);
                    let mut gx = vec![T::zero(); x.len()];
                    for s in 0..b {
                        for ch in 0..c {
                            let v = g.data()[s * c + ch] * inv;
                            let base = (s * c + ch) * plane;
                            gx[base..base + plane].iter_mut().for_each(|e| *e = v);
                        }
                    }
                    Some(like_x(gx)?)
                } else {
                    None
                }
            }
            LayerKind::BatchNormFrozen { channels, epsilon } => {
                let (scale, mean) = bn_affine(layer, epsilon);
                let plane = in_shape.iter().product::<usize>() / channels;
                if emit {
                    let inv_std: Vec<T> = layer.params[3]
                        .value
                        .data()
                        .iter()
                        .map(|&v| T::one() / (v + T::lit(epsilon)).sqrt())
                        .collect();
                    let mut ggamma = vec![T::zero(); channels];
                    let mut gbeta = vec![T::zero(); channels];
                    for (k, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                        let c = (k / plane) % channels;
                        ggamma[c] += gv * (xv - mean[c]) * inv_std[c];
                        gbeta[c] += gv;
                    }
                    params.insert(layer.params[0].name.clone(), Tensor::new(vec![channels], ggamma)?);
                    params.insert(layer.params[1].name.clone(), Tensor::new(vec![channels], gbeta)?);
                }
                if want_x {
                    let gx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| gv * scale[(k / plane) % channels])
                        .collect();
                    Some(like_x(gx)?)
                } else {
                    None
                }
            }
            LayerKind::ResidualAdd { .. } => {
                return Ok((want_x.then(|| g.clone()), Some(g.clone())));
            }
            LayerKind::Relu => want_x
                .then(|| {
                    like_x(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                            .collect(),
                    )
                })
                .transpose()?,
            LayerKind::Tanh => want_x
                .then(|| {
                    like_x(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                            .collect(),
                    )
                })
                .transpose()?,
            LayerKind::Dropout { .. } => match aux {
                Aux::Mask(mask) if want_x => Some(like_x(g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect())?),
                _ if want_x => Some(like_x(g.data().to_vec())?),
                _ => None,
            },
            LayerKind::Flatten => want_x.then(|| like_x(g.data().to_vec())).transpose()?,
            LayerKind::Softmax => {
                if want_x {
                    let n = in_shape[0];
                    let mut gx = Vec::with_capacity(x.len());
                    for (grow, prow) in g.data().chunks(n).zip(y.data().chunks(n)) {
                        let dot = grow.iter().zip(prow).fold(T::zero(), |a, (&gv, &p)| a + gv * p);
                        gx.extend(grow.iter().zip(prow).map(|(&gv, &p)| p * (gv - dot)));
                    }
                    Some(like_x(gx)?)
                } else {
                    None
                }
            }
        };
        Ok((gx, None))
    }
}

/// Per-channel `(scale, mean)` with `scale = γ/√(σ²+ε)`.
fn bn_affine<T: Scalar>(layer: &Layer<T>, epsilon: f64) -> (Vec<T>, Vec<T>) {
    let gamma = layer.params[0].value.data();
    let mean = layer.params[2].value.data();
    let var = layer.params[3].value.data();
    let scale = gamma
        .iter()
        .zip(var)
        .map(|(&g, &v)| g / (v + T::lit(epsilon)).sqrt())
        .collect();
    (scale, mean.to_vec())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

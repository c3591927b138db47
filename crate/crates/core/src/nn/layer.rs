use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn layer_kind(self) -> LayerKind {
        match self {
            Activation::Relu => LayerKind::Relu,
            Activation::Tanh => LayerKind::Tanh,
        }
    }
}

/// Where a layer reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Output of the immediately preceding layer (graph input for layer 0).
    Previous,
    GraphInput,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `y = x·W + b` with `W` stored `inputs × units`.
    Dense { inputs: usize, units: usize },
    /// Square-kernel cross-correlation; kernel stored `out×in×k×k`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    /// Inference-mode batch normalization with imported running statistics.
    BatchNormFrozen { channels: usize, epsilon: f64 },
    /// Adds the output of `skip` to this layer's input.
    ResidualAdd { skip: Source },
    Relu,
    Tanh,
    Dropout { rate: f64 },
    /// Channels-first row-major flatten of each sample.
    Flatten,
    Softmax,
}

impl LayerKind {
    /// Parameter roles and their shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Dense { inputs, units } => {
                vec![("kernel", vec![inputs, units]), ("bias", vec![units])]
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut p = vec![("kernel", vec![out_channels, in_channels, kernel, kernel])];
                if bias {
                    p.push(("bias", vec![out_channels]));
                }
                p
            }
            LayerKind::BatchNormFrozen { channels, .. } => vec![
                ("gamma", vec![channels]),
                ("beta", vec![channels]),
                ("moving_mean", vec![channels]),
                ("moving_variance", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// Roles that receive gradients when the layer is trainable.
    pub fn is_trainable_role(&self, role: &str) -> bool {
        match self {
            LayerKind::BatchNormFrozen { .. } => role == "gamma" || role == "beta",
            _ => true,
        }
    }

    /// Conv and dense layers; the unit counted by freeze plans.
    pub fn is_weight_layer(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::BatchNormFrozen { .. } => "batch_norm_frozen",
            LayerKind::ResidualAdd { .. } => "residual_add",
            LayerKind::Relu => "relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub role: &'static str,
    pub name: String,
    pub value: Tensor<T>,
}

/// One node of a [`NetworkGraph`](super::NetworkGraph) and the parameters it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind,
    pub source: Source,
    pub trainable: bool,
    /// Architectural block this layer belongs to (e.g. `block5`, `conv5_block3`).
    pub block: Option<String>,
    pub(crate) params: Vec<Param<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Creates a trainable layer with zero-filled parameters.
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        let name = name.into();
        let params = kind
            .param_shapes()
            .into_iter()
            .map(|(role, shape)| Param {
                role,
                name: format!("{name}/{role}"),
                value: Tensor::zeros(&shape),
            })
            .collect();
        Layer {
            name,
            kind,
            source: Source::Previous,
            trainable: true,
            block: None,
            params,
        }
    }

    pub fn dense(name: impl Into<String>, inputs: usize, units: usize) -> Self {
        Self::new(name, LayerKind::Dense { inputs, units })
    }

    pub fn conv2d(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias: true,
            },
        )
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn in_block(mut self, block: impl Into<String>) -> Self {
        self.block = Some(block.into());
        self
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, role: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.role == role).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, role: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.role == role)
            .map(|p| &mut p.value)
    }

    /// Replaces a parameter value, checking its shape.
    pub fn set_param(&mut self, role: &str, value: Tensor<T>) -> Result<()> {
        let name = self.name.clone();
        let slot = self.param_mut(role).ok_or_else(|| Error::Parameter {
            name: format!("{name}/{role}"),
            message: "no such parameter".into(),
        })?;
        if slot.shape() != value.shape() {
            return Err(Error::Parameter {
                name: format!("{name}/{role}"),
                message: format!(
                    "expected shape {:?}, got {:?}",
                    slot.shape(),
                    value.shape()
                ),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Renames the layer and its parameters consistently.
    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        for p in &mut self.params {
            p.name = format!("{}/{}", self.name, p.role);
        }
        self
    }
}

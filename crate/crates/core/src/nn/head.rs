use serde::{Deserialize, Serialize};

use super::graph::NetworkGraph;
use super::init::init_fan_in_uniform;
use super::layer::{Activation, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Architecture of the classification head placed on top of the backbone:
/// flatten, hidden dense layers, optional dropout, dense output, softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Units per hidden dense layer; its length is the number of layers.
    pub units: Vec<usize>,
    pub activation: Activation,
    /// Dropout rate after the last hidden layer, if any.
    #[serde(default)]
    pub dropout: Option<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            units: vec![256],
            activation: Activation::Relu,
            dropout: None,
        }
    }
}

pub const HEAD_PREFIX: &str = "head_";

/// Builds and initializes a head reading features of `feature_shape`.
pub fn build_head<T: Scalar>(cfg: &HeadConfig, feature_shape: &[usize], classes: usize, seed: u64) -> Result<NetworkGraph<T>> {
    if classes < 2 {
        return Err(Error::Validation("a classifier needs at least two classes".into()));
    }
    let mut layers = Vec::new();
    let mut width: usize = feature_shape.iter().product();
    if feature_shape.len() != 1 {
        layers.push(Layer::new("head_flatten", LayerKind::Flatten));
    }
    for (i, &u) in cfg.units.iter().enumerate() {
        layers.push(Layer::dense(format!("head_dense_{i}"), width, u));
        layers.push(Layer::new(format!("head_{}_{i}", act_name(cfg.activation)), cfg.activation.layer_kind()));
        width = u;
    }
    if let Some(rate) = cfg.dropout {
        layers.push(Layer::new("head_dropout", LayerKind::Dropout { rate }));
    }
    layers.push(Layer::dense("head_output", width, classes));
    layers.push(Layer::new("head_softmax", LayerKind::Softmax));
    let mut net = NetworkGraph::new(feature_shape.to_vec(), layers)?;
    init_fan_in_uniform(&mut net, seed);
    Ok(net)
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

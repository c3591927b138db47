//! Layer-by-layer descriptions of the two supported backbones. Layer and
//! parameter names follow the Keras application models so an exporter can
//! map zoo tensors one-to-one.

use serde::{Deserialize, Serialize};

use crate::data::ChannelMode;
use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, NetworkGraph, Source};
use crate::scalar::Scalar;

/// BatchNorm epsilon used by the ResNet-50 zoo weights.
pub const RESNET_BN_EPSILON: f64 = 1.001e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Vgg16,
    Resnet50,
}

impl Architecture {
    pub const NAMES: [&'static str; 2] = ["vgg16", "resnet50"];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Vgg16 => "vgg16",
            Architecture::Resnet50 => "resnet50",
        }
    }

    pub fn default_input_size(self) -> usize {
        match self {
            Architecture::Vgg16 => 224,
            Architecture::Resnet50 => 180,
        }
    }

    pub fn default_preprocessing(self) -> ChannelMode {
        ChannelMode::CaffeBgr
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg16" => Ok(Architecture::Vgg16),
            "resnet50" => Ok(Architecture::Resnet50),
            other => Err(Error::Unsupported(format!("architecture `{other}` (known: vgg16, resnet50)"))),
        }
    }
}

/// Everything needed to rebuild a backbone topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    pub input_size: usize,
    /// Channel widths are divided by this (tiny test backbones); 1 for zoo weights.
    #[serde(default = "one")]
    pub width_divisor: usize,
    /// Keep the original ImageNet classifier on top of the features.
    #[serde(default)]
    pub include_top: bool,
    #[serde(default = "imagenet_classes")]
    pub classes: usize,
}

fn one() -> usize {
    1
}

fn imagenet_classes() -> usize {
    1000
}

impl BackboneSpec {
    pub fn new(architecture: Architecture) -> Self {
        BackboneSpec {
            architecture,
            input_size: architecture.default_input_size(),
            width_divisor: 1,
            include_top: false,
            classes: 1000,
        }
    }

    pub fn with_input_size(self, input_size: usize) -> Self {
        BackboneSpec { input_size, ..self }
    }

    pub fn with_divisor(self, width_divisor: usize) -> Self {
        BackboneSpec { width_divisor, ..self }
    }

    pub fn with_top(self, classes: usize) -> Self {
        BackboneSpec {
            include_top: true,
            classes,
            ..self
        }
    }

    fn width(&self, w: usize) -> usize {
        (w / self.width_divisor).max(1)
    }

    /// Builds the zero-initialized graph. Returns it with the number of
    /// leading layers that form the feature extractor (the rest is the top).
    pub fn build<T: Scalar>(&self) -> Result<(NetworkGraph<T>, usize)> {
        if self.width_divisor == 0 || self.input_size == 0 {
            return Err(Error::Validation(format!("invalid backbone spec {self:?}")));
        }
        let (layers, features) = match self.architecture {
            Architecture::Vgg16 => self.vgg16(),
            Architecture::Resnet50 => self.resnet50(),
        };
        let mut net = NetworkGraph::new(vec![3, self.input_size, self.input_size], layers)?;
        net.freeze_all();
        Ok((net, features))
    }

    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        let (net, features) = self.build::<f32>()?;
        Ok(if features == 0 {
            net.input_shape().to_vec()
        } else {
            net.layer_output_shape(features - 1).to_vec()
        })
    }

    fn vgg16<T: Scalar>(&self) -> (Vec<Layer<T>>, usize) {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (b, (&w, &reps)) in [64, 128, 256, 512, 512].iter().zip(&[2, 2, 3, 3, 3]).enumerate() {
            let block = format!("block{}", b + 1);
            let w = self.width(w);
            for j in 1..=reps {
                let name = format!("{block}_conv{j}");
                layers.push(Layer::conv2d(&name, c_in, w, 3, 1, 1).in_block(&block));
                layers.push(Layer::new(format!("{name}_relu"), LayerKind::Relu).in_block(&block));
                c_in = w;
            }
            let pool = LayerKind::MaxPool {
                window: 2,
                stride: 2,
                padding: 0,
            };
            layers.push(Layer::new(format!("{block}_pool"), pool).in_block(&block));
        }
        let features = layers.len();
        if self.include_top {
            let side = self.input_size / 32;
            let fc = self.width(4096);
            layers.push(Layer::new("flatten", LayerKind::Flatten));
            layers.push(Layer::dense("fc1", c_in * side * side, fc));
            layers.push(Layer::new("fc1_relu", LayerKind::Relu));
            layers.push(Layer::dense("fc2", fc, fc));
            layers.push(Layer::new("fc2_relu", LayerKind::Relu));
            layers.push(Layer::dense("predictions", fc, self.classes));
            layers.push(Layer::new("predictions_softmax", LayerKind::Softmax));
        }
        (layers, features)
    }

    fn resnet50<T: Scalar>(&self) -> (Vec<Layer<T>>, usize) {
        let bn = |name: String, channels: usize, block: &str| {
            Layer::new(
                name,
                LayerKind::BatchNormFrozen {
                    channels,
                    epsilon: RESNET_BN_EPSILON,
                },
            )
            .in_block(block)
        };
        let mut layers: Vec<Layer<T>> = Vec::new();
        let stem = self.width(64);
        layers.push(Layer::conv2d("conv1_conv", 3, stem, 7, 2, 3).in_block("conv1"));
        layers.push(bn("conv1_bn".into(), stem, "conv1"));
        layers.push(Layer::new("conv1_relu", LayerKind::Relu).in_block("conv1"));
        let pool = LayerKind::MaxPool {
            window: 3,
            stride: 2,
            padding: 1,
        };
        layers.push(Layer::new("pool1_pool", pool).in_block("conv1"));
        let mut c_in = stem;
        for (stage, (&filters, &(blocks, stride))) in [64, 128, 256, 512]
            .iter()
            .zip(&[(3, 1), (4, 2), (6, 2), (3, 2)])
            .enumerate()
        {
            let f = self.width(filters);
            let out = 4 * f;
            for b in 1..=blocks {
                let block = format!("conv{}_block{b}", stage + 2);
                let s = if b == 1 { stride } else { 1 };
                let input = Source::Layer(layers.len() - 1);
                let skip = if b == 1 {
                    layers.push(Layer::conv2d(format!("{block}_0_conv"), c_in, out, 1, s, 0).with_source(input).in_block(&block));
                    layers.push(bn(format!("{block}_0_bn"), out, &block));
                    Source::Layer(layers.len() - 1)
                } else {
                    input
                };
                layers.push(Layer::conv2d(format!("{block}_1_conv"), c_in, f, 1, s, 0).with_source(input).in_block(&block));
                layers.push(bn(format!("{block}_1_bn"), f, &block));
                layers.push(Layer::new(format!("{block}_1_relu"), LayerKind::Relu).in_block(&block));
                layers.push(Layer::conv2d(format!("{block}_2_conv"), f, f, 3, 1, 1).in_block(&block));
                layers.push(bn(format!("{block}_2_bn"), f, &block));
                layers.push(Layer::new(format!("{block}_2_relu"), LayerKind::Relu).in_block(&block));
                layers.push(Layer::conv2d(format!("{block}_3_conv"), f, out, 1, 1, 0).in_block(&block));
                layers.push(bn(format!("{block}_3_bn"), out, &block));
                layers.push(Layer::new(format!("{block}_add"), LayerKind::ResidualAdd { skip }).in_block(&block));
                layers.push(Layer::new(format!("{block}_out"), LayerKind::Relu).in_block(&block));
                c_in = out;
            }
        }
        let features = layers.len();
        if self.include_top {
            layers.push(Layer::new("avg_pool", LayerKind::GlobalAvgPool));
            layers.push(Layer::dense("predictions", c_in, self.classes));
            layers.push(Layer::new("predictions_softmax", LayerKind::Softmax));
        }
        (layers, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_feature_shape_at_224() {
        let spec = BackboneSpec::new(Architecture::Vgg16);
        assert_eq!(spec.feature_shape().unwrap(), vec![512, 7, 7]);
    }

    #[test]
    fn vgg16_with_top_has_32_tensors() {
        let spec = BackboneSpec::new(Architecture::Vgg16).with_divisor(16).with_top(1000);
        let (net, features) = spec.build::<f32>().unwrap();
        assert_eq!(net.params().count(), 32);
        assert_eq!(net.weight_layer_indices().len(), 16);
        assert_eq!(net.layers()[features].name, "flatten");
        assert_eq!(net.output_shape(), &[1000]);
    }

    #[test]
    fn resnet50_structure() {
        let spec = BackboneSpec::new(Architecture::Resnet50);
        assert_eq!(spec.feature_shape().unwrap(), vec![2048, 6, 6]);
        let (net, _) = spec.with_divisor(16).build::<f32>().unwrap();
        let convs = net
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .count();
        // 1 stem + 16 blocks × 3 + 4 projection shortcuts
        assert_eq!(convs, 53);
        let adds = net
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::ResidualAdd { .. }))
            .count();
        assert_eq!(adds, 16);
    }

    #[test]
    fn resnet50_at_224_matches_zoo_shape() {
        let spec = BackboneSpec::new(Architecture::Resnet50).with_input_size(224);
        assert_eq!(spec.feature_shape().unwrap(), vec![2048, 7, 7]);
    }

    #[test]
    fn parse_architecture() {
        assert_eq!("VGG16".parse::<Architecture>().unwrap(), Architecture::Vgg16);
        assert!(matches!("inception".parse::<Architecture>(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn vgg_rejects_odd_pool_input() {
        let spec = BackboneSpec::new(Architecture::Vgg16).with_input_size(180);
        assert!(spec.build::<f32>().is_err());
    }
}

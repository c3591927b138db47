//! Pretrained backbones: topology, archive I/O, freeze plans, the feature
//! cache and conformance bundles.

mod arch;
mod cache;
mod freeze;
pub mod reference;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use arch::{Architecture, BackboneSpec, RESNET_BN_EPSILON};
pub use cache::{extract_features, trunk_fingerprint, ExtractStats, FeatureCache};
pub use freeze::{backbone_len, split_at_cut, CutSplit, FreezePlan, Granularity};

use crate::archive::{ArchiveKind, Manifest, WeightsArchive};
use crate::data::{ChannelMode, PreprocessMode};
use crate::error::{Error, Result};
use crate::nn::{init_fan_in_uniform, NetworkGraph};
use crate::seed::derive;
use crate::tensor::Tensor32;

/// A loaded backbone. All layers are frozen.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub preprocessing: ChannelMode,
    graph: NetworkGraph<f32>,
    feature_len: usize,
}

impl Backbone {
    /// Zero-initialized backbone, mostly useful as a shape template.
    pub fn zeros(spec: BackboneSpec) -> Result<Self> {
        let (graph, feature_len) = spec.build()?;
        Ok(Backbone {
            preprocessing: spec.architecture.default_preprocessing(),
            spec,
            graph,
            feature_len,
        })
    }

    /// Randomly initialized stand-in for pretrained weights: fan-in uniform
    /// kernels, small random biases and non-trivial batch-norm statistics.
    pub fn random(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let mut b = Self::zeros(spec)?;
        init_fan_in_uniform(&mut b.graph, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xB1A5]));
        let names: Vec<(String, &'static str)> = b
            .graph
            .params()
            .filter(|p| p.role != "kernel")
            .map(|p| (p.name.clone(), p.role))
            .collect();
        for (name, role) in names {
            let (lo, hi) = match role {
                "gamma" | "moving_variance" => (0.5, 1.5),
                _ => (-0.1, 0.1),
            };
            for v in b.graph.param_data_mut(&name).expect("listed") {
                *v = rng.gen_range(lo..hi);
            }
        }
        Ok(b)
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.architecture
    }

    pub fn preprocess_mode(&self) -> PreprocessMode {
        PreprocessMode {
            size: self.spec.input_size,
            channels: self.preprocessing,
        }
    }

    /// Full graph, including the original classifier when present.
    pub fn graph(&self) -> &NetworkGraph<f32> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut NetworkGraph<f32> {
        &mut self.graph
    }

    /// Number of leading graph layers forming the feature extractor.
    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    /// The convolutional feature extractor without the classifier.
    pub fn features(&self) -> NetworkGraph<f32> {
        self.graph.slice(0..self.feature_len).expect("prefix slice is valid")
    }

    pub fn feature_shape(&self) -> &[usize] {
        if self.feature_len == 0 {
            self.graph.input_shape()
        } else {
            self.graph.layer_output_shape(self.feature_len - 1)
        }
    }

    /// The same weights rebuilt for another input size. Only possible when
    /// no layer's parameters depend on the spatial size (no dense top).
    pub fn resized(&self, input_size: usize) -> Result<Self> {
        if input_size == self.spec.input_size {
            return Ok(self.clone());
        }
        let mut b = Self::zeros(self.spec.with_input_size(input_size))?;
        b.preprocessing = self.preprocessing;
        for p in self.graph.params() {
            b.graph.set_param(&p.name, p.value.clone()).map_err(|e| {
                Error::Validation(format!("cannot resize backbone to {input_size}: {e}"))
            })?;
        }
        Ok(b)
    }

    fn layer_order(graph: &NetworkGraph<f32>) -> Vec<String> {
        graph
            .layers()
            .iter()
            .filter(|l| !l.params().is_empty())
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn to_archive(&self) -> Result<WeightsArchive> {
        let mut m = Manifest::new(ArchiveKind::Backbone);
        m.architecture = Some(self.spec.architecture);
        m.input_size = Some(self.spec.input_size);
        m.width_divisor = self.spec.width_divisor;
        m.include_top = self.spec.include_top;
        m.classes = self.spec.include_top.then_some(self.spec.classes);
        m.preprocessing = Some(self.preprocessing);
        m.layer_order = Self::layer_order(&self.graph);
        let mut a = WeightsArchive::new(m);
        for p in self.graph.params() {
            a.push(p.name.clone(), p.value.clone())?;
        }
        Ok(a)
    }

    /// Rebuilds the topology named by the manifest and fills it from the
    /// archive. Every expected tensor must be present with its exact shape
    /// and no extra tensors are allowed.
    pub fn from_archive(archive: &WeightsArchive) -> Result<Self> {
        let m = &archive.manifest;
        if m.kind != ArchiveKind::Backbone {
            return Err(Error::Format(format!("expected a backbone archive, found {:?}", m.kind)));
        }
        let architecture = m
            .architecture
            .ok_or_else(|| Error::Unsupported("archive manifest names no architecture".into()))?;
        let mut spec = BackboneSpec::new(architecture).with_divisor(m.width_divisor);
        if let Some(s) = m.input_size {
            spec = spec.with_input_size(s);
        }
        if m.include_top {
            spec = spec.with_top(m.classes.unwrap_or(1000));
        }
        let mut b = Self::zeros(spec)?;
        if let Some(mode) = m.preprocessing {
            b.preprocessing = mode;
        }
        let expected = Self::layer_order(&b.graph);
        if !m.layer_order.is_empty() && m.layer_order != expected {
            return Err(Error::Format(format!(
                "manifest layer order does not match {architecture}: {} layers listed, {} expected",
                m.layer_order.len(),
                expected.len()
            )));
        }
        let names: Vec<String> = b.graph.params().map(|p| p.name.clone()).collect();
        let missing: Vec<&str> = names.iter().filter(|n| archive.get(n).is_none()).map(|s| s.as_str()).collect();
        if !missing.is_empty() {
            let head: Vec<_> = missing.iter().take(5).collect();
            return Err(Error::Format(format!("archive lacks {} tensors, e.g. {head:?}", missing.len())));
        }
        if archive.len() != names.len() {
            let extra: Vec<_> = archive
                .entries()
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !names.contains(n))
                .take(5)
                .collect();
            return Err(Error::Format(format!("archive has unexpected tensors, e.g. {extra:?}")));
        }
        for n in &names {
            b.graph
                .set_param(n, archive.get(n).expect("checked").clone())
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }
}

/// Reads and validates a backbone archive; the returned graph is frozen.
pub fn load_archive(path: impl AsRef<Path>) -> Result<Backbone> {
    let path = path.as_ref();
    Backbone::from_archive(&WeightsArchive::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Runs eval-mode inference in batches and stacks the results.
pub fn infer_batched(net: &NetworkGraph<f32>, inputs: &[Tensor32], batch_size: usize) -> Result<Vec<Tensor32>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor32> = chunk.iter().collect();
        let y = net.infer(&Tensor32::stack(&refs)?)?;
        out.extend((0..y.batch()).map(|i| y.sample_tensor(i)));
    }
    Ok(out)
}

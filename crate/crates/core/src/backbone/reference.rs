//! Conformance bundles: a backbone archive plus one reference image and the
//! tensors a correct implementation must compute from it.
//!
//! A bundle directory holds [`MODEL_FILE`] and [`REFERENCE_FILE`]. The
//! reference archive carries `image` (`H×W×3` RGB in `[0, 255]`),
//! `preprocessed` (`3×S×S`), optionally `logits` (pre-softmax scores of the
//! original classifier) and any number of `activation/<layer>` entries.

use std::fs;
use std::path::Path;

use super::{load_archive, Backbone};
use crate::archive::{ArchiveKind, Manifest, WeightsArchive};
use crate::data::{preprocess, Image};
use crate::error::{Error, Result};
use crate::nn::{LayerKind, Mode};
use crate::tensor::{Tensor, Tensor32};

pub const MODEL_FILE: &str = "model.ftfw";
pub const REFERENCE_FILE: &str = "reference.ftfw";
pub const ACTIVATION_PREFIX: &str = "activation/";

/// One compared tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformanceRow {
    pub name: String,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl ConformanceRow {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

pub fn image_to_tensor(image: &Image) -> Tensor32 {
    Tensor32::new(vec![image.height(), image.width(), 3], image.data().to_vec()).expect("consistent image")
}

pub fn image_from_tensor(t: &Tensor32) -> Result<Image> {
    match t.shape() {
        &[h, w, 3] => Image::new(w, h, t.data().to_vec()),
        s => Err(Error::Format(format!("reference image has shape {s:?}, expected H×W×3"))),
    }
}

fn logits_layer(b: &Backbone) -> Option<usize> {
    let layers = b.graph().layers();
    match layers.last() {
        Some(l) if matches!(l.kind, LayerKind::Softmax) && layers.len() > b.feature_len() => Some(layers.len() - 2),
        _ => None,
    }
}

/// Writes a bundle whose reference tensors are computed in 64-bit
/// arithmetic from `backbone` and `image`. `activations` names the layers
/// whose outputs are recorded.
pub fn write_bundle(backbone: &Backbone, image: &Image, activations: &[&str], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    backbone.save(dir.join(MODEL_FILE))?;
    let x: Tensor<f64> = preprocess(image, &backbone.preprocess_mode())?;
    let net = backbone.graph().cast::<f64>();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.clone().reshape(shape)?;
    let (trace, _) = net.forward(&batch, Mode::Eval, 0)?;

    let mut m = Manifest::new(ArchiveKind::Reference);
    m.architecture = Some(backbone.architecture());
    m.input_size = Some(backbone.spec.input_size);
    m.preprocessing = Some(backbone.preprocessing);
    let mut a = WeightsArchive::new(m);
    a.push("image", image_to_tensor(image))?;
    a.push("preprocessed", x.cast())?;
    if let Some(i) = logits_layer(backbone) {
        a.push("logits", trace.activation(i).sample_tensor(0).cast())?;
    }
    for name in activations {
        let i = net
            .layer_index(name)
            .ok_or_else(|| Error::Validation(format!("no layer named `{name}`")))?;
        a.push(format!("{ACTIVATION_PREFIX}{name}"), trace.activation(i).sample_tensor(0).cast())?;
    }
    a.write(dir.join(REFERENCE_FILE))
}

/// Loads a bundle, replays the reference image through this crate's
/// preprocessing and forward pass, and compares every recorded tensor.
pub fn check_bundle(dir: impl AsRef<Path>, tolerance: f64) -> Result<Vec<ConformanceRow>> {
    let dir = dir.as_ref();
    let backbone = load_archive(dir.join(MODEL_FILE))?;
    let reference = WeightsArchive::read(dir.join(REFERENCE_FILE))?;
    if reference.manifest.kind != ArchiveKind::Reference {
        return Err(Error::Format("reference file is not a reference archive".into()));
    }
    if let Some(a) = reference.manifest.architecture {
        if a != backbone.architecture() {
            return Err(Error::Validation(format!(
                "reference is for {a}, model archive is {}",
                backbone.architecture()
            )));
        }
    }
    let need = |name: &str| {
        reference
            .get(name)
            .ok_or_else(|| Error::Format(format!("reference bundle lacks `{name}`")))
    };
    let image = image_from_tensor(need("image")?)?;
    let x: Tensor32 = preprocess(&image, &backbone.preprocess_mode())?;
    let mut rows = Vec::new();
    let mut compare = |name: &str, got: &Tensor32, want: &Tensor32| -> Result<()> {
        if got.shape() != want.shape() {
            return Err(Error::Validation(format!(
                "`{name}`: computed shape {:?}, reference {:?}",
                got.shape(),
                want.shape()
            )));
        }
        rows.push(ConformanceRow {
            name: name.to_string(),
            max_abs_diff: got.max_abs_diff(want)? as f64,
            tolerance,
        });
        Ok(())
    };
    compare("preprocessed", &x, need("preprocessed")?)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let (trace, _) = backbone.graph().forward(&x.clone().reshape(shape)?, Mode::Eval, 0)?;
    if let Some(want) = reference.get("logits") {
        let i = logits_layer(&backbone)
            .ok_or_else(|| Error::Validation("reference has logits but the archive has no classifier".into()))?;
        compare("logits", &trace.activation(i).sample_tensor(0), want)?;
    }
    for (name, want) in reference.entries() {
        if let Some(layer) = name.strip_prefix(ACTIVATION_PREFIX) {
            let i = backbone
                .graph()
                .layer_index(layer)
                .ok_or_else(|| Error::Validation(format!("reference names unknown layer `{layer}`")))?;
            compare(name, &trace.activation(i).sample_tensor(0), want)?;
        }
    }
    Ok(rows)
}

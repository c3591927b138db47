use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// ImageNet per-channel means in BGR order.
pub const CAFFE_BGR_MEANS: [f32; 3] = [103.939, 116.779, 123.68];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelMode {
    /// RGB→BGR, then subtract [`CAFFE_BGR_MEANS`].
    #[serde(rename = "caffe-bgr-mean-centered")]
    CaffeBgr,
    /// `x/127.5 − 1`, channels kept in RGB order.
    #[serde(rename = "scale-minus1-plus1")]
    ScaleSymmetric,
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelMode::CaffeBgr => "caffe-bgr-mean-centered",
            ChannelMode::ScaleSymmetric => "scale-minus1-plus1",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessMode {
    /// Square target side in pixels.
    pub size: usize,
    pub channels: ChannelMode,
}

impl PreprocessMode {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Validation("preprocess size must be positive".into()));
        }
        Ok(())
    }
}

/// Resizes (bilinear, no aspect preservation) and converts to a channels-first
/// `3×S×S` tensor.
pub fn preprocess<T: Scalar>(image: &Image, mode: &PreprocessMode) -> Result<Tensor<T>> {
    mode.validate()?;
    let s = mode.size;
    let img = image.resize(s, s)?;
    let plane = s * s;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        match mode.channels {
            ChannelMode::CaffeBgr => {
                for (c, &src) in [2usize, 1, 0].iter().enumerate() {
                    data[c * plane + i] = T::of_f32(px[src] - CAFFE_BGR_MEANS[c]);
                }
            }
            ChannelMode::ScaleSymmetric => {
                for c in 0..3 {
                    data[c * plane + i] = T::of_f32(px[c] / 127.5 - 1.0);
                }
            }
        }
    }
    Tensor::new(vec![3, s, s], data)
}

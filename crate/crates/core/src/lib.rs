//! Transfer learning on imported CNN backbones without an ML framework.
//!
//! The crate covers the whole pipeline for a two-class image classifier:
//! loading pretrained weights ([`backbone`]), dataset handling and
//! augmentation ([`data`]), head training on frozen features followed by
//! fine-tuning of the last backbone layers ([`trainer`]), Adam
//! ([`optim`]), Hyperband search over head architectures ([`tuner`]) and
//! evaluation ([`metrics`]).
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32` and gradient
//! checks use `f64`. The aliases below name the common instantiations.

pub mod archive;
pub mod backbone;
pub mod data;
mod error;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
mod scalar;
pub mod seed;
pub mod synthetic;
mod tensor;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tensor, Tensor32, Tensor64};

pub type Network32 = nn::NetworkGraph<f32>;
pub type Network64 = nn::NetworkGraph<f64>;
pub type AdamState32 = optim::AdamState<f32>;
pub type AdamState64 = optim::AdamState<f64>;

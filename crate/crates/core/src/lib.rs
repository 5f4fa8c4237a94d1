//! Text-prompted segmentation with an early vision-language fusion encoder
//! feeding a lightweight SAM-style mask decoder.

#![allow(clippy::unnecessary_cast)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod sam;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use metrics::{Mask, MetricsReport};
pub use model::{EvfSam, PreparedSample};
pub use tensor::{Elem, Tensor};

//! Open-world fake-image detection with compression-aware training.

pub mod cgc;
pub mod codec;
pub mod error;
pub mod harness;
pub mod image;
pub mod losses;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

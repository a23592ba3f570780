//! Two-stage additive vector quantization for small convolutional denoising
//! networks: per-layer codebook calibration, mixed-precision allocation,
//! teacher-student fine-tuning of codes and codebooks, and a lookup-table
//! convolution kernel with exact operation counts.

pub mod act_usq;
pub mod aq;
pub mod container;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod greedy;
pub mod lut;
pub mod nn;
pub mod optim;
pub mod quantized;
pub mod rng;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Scalar, Tensor};

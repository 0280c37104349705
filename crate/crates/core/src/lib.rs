//! Cascaded-modulation GAN for image inpainting, built from scratch.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape with second-order
//!   gradients, FFTs and a seeded PRNG.
//! * [`ffc`]: fast Fourier convolution and the multi-scale encoder.
//! * [`modulation`]: modulated convolution, the affine parameter network,
//!   spatial modulation and the global/spatial cascade stage.
//! * [`generator`]: the full generator, mapping network, discriminator and
//!   feature visualisation.
//! * [`maskgen`]: object-aware training masks.
//! * [`training`]: losses, masked-R1, Adam and the training loop.
//! * [`imageio`]: PNG, the procedural dataset and checkpoints.
//! * [`verify`]: the oracle-backed property suite behind `cmgan verify`.

pub mod error;
pub mod ffc;
pub mod generator;
pub mod imageio;
pub mod layers;
pub mod maskgen;
pub mod modulation;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Precision, Prng, Scalar, Tape, Tensor, Var};

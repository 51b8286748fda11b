//! Multi-level spiking neural network engine.
//!
//! Integrate-and-fire neurons with soft reset that emit integer-valued
//! spikes in `[0, N]`, trained end to end with surrogate-gradient or
//! straight-through backward rules on a small reverse-mode autograd tape.
//! Also provides residual block variants (SEW, spiking ResNet and the
//! barrier-neuron sparse block), spike-activity profiling and an
//! event-driven energy estimator.

pub mod autograd;
pub mod coding;
pub mod energy;
pub mod error;
pub mod io;
pub mod network;
pub mod neuron;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

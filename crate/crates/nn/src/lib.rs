//! Minimal deterministic reverse-mode differentiation engine.
//!
//! Small by intent: dense affine maps, elementwise nonlinearities, 2-D
//! convolution / transposed convolution / max-pooling, and the two loss
//! heads needed by small encoder/decoder stacks. Everything is f64,
//! single-threaded within a training run, and fully reproducible from an
//! explicit seed.

pub mod error;
pub mod params;
pub mod rng;
pub mod serialize;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use params::{glorot_uniform, ParameterSet};
pub use rng::Rng;
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;

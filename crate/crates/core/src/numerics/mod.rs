//! Tensor arithmetic, reverse-mode differentiation, and the optimizer.

pub mod functional;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use functional::Mode;
pub use optim::{OptimKind, OptimizerState};
pub use params::ParamSet;
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

//! Small reverse-mode automatic differentiation engine.

mod adam;
mod conv;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use conv::ConvGeometry;
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{kl_divergence, Backward, BiasMode, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

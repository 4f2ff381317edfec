//! Minimal reverse-mode autodiff engine and neural-net layers used by the
//! tokenizer and the token-level transformers. Everything runs on f64
//! arrays; determinism is exact given fixed inputs and parameters.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod param;
pub mod tape;
#[cfg(test)]
pub mod testutil;

pub use adam::{Adam, LrSchedule};
pub use param::{Binding, ParamStore};
pub use tape::{Gradients, Tape, Var};

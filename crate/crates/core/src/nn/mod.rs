//! Minimal differentiable-programming toolkit used by the separators and the
//! acoustic model.

mod check;
mod graph;
pub mod layers;
mod params;

pub use check::{check_gradients, relative_error, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Mat, Var};
pub use params::{glorot, normal, uniform, Adam, AdamConfig, ParamStore};

#[cfg(test)]
mod tests;

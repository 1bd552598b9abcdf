//! Minimal dense autodiff and the layers the models are assembled from.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Gradients, Graph, Mat, Var};
pub use params::{Adam, ParamId, ParamStore};

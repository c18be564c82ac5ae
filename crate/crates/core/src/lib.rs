//! Universal structural basis distillation for source-free graph domain adaptation.

pub mod distill;
pub mod adapt;
pub mod datagen;
pub mod error;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod gw;
pub mod tape;
pub mod tensor;
pub mod tudataset;

pub use error::{Error, Result};
pub use graph::{Domain, Graph, UnlabeledDomain, UnlabeledGraph};
pub use tensor::Tensor;

//! Numeric core: matrices, activations, a reverse-mode tape, spatial jets,
//! fully-connected networks, parameter storage and the Adam update.

pub mod activation;
pub mod adam;
pub mod graph;
pub mod jet;
pub mod mat;
pub mod mlp;
pub mod params;

pub use activation::Activation;
pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use jet::{FieldJet, SpatialJet};
pub use mat::Mat;
pub use mlp::Mlp;
pub use params::{Bound, ParamEntry, ParamGroup, ParamId, ParamStore};

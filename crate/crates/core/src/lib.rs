//! Graph attention networks (GATv2) whose un-normalized attention scores are
//! additionally supervised with intra-/inter-class edge labels.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] and [`dataset`]: undirected graphs, node data, homophily
//!   measurement, inter-class edge removal, SBM generation and the on-disk
//!   dataset format.
//! * [`tensor`]: dense 2-D tensors on a reverse-mode differentiation tape,
//!   plus [`gradcheck`] for central-difference verification.
//! * [`model`]: the GATv2 layer and network, exposing per-layer scores.
//! * [`objective`]: node cross-entropy, attention supervision and the
//!   combined objective.
//! * [`train`]: Glorot init, Adam, the epoch loop with early stopping.
//! * [`experiments`]: multi-seed runs, homophily sweeps, attention score
//!   distributions and grid search.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeData};
pub use model::{DirectedEdgeIndex, ForwardTrace, ModelParams};
pub use tensor::{Tape, Tensor, Var};
pub use train::TrainConfig;

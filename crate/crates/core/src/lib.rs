//! Graph-informed transformer neural operator.
//!
//! Point clouds become KNN or radius graphs, and hybrid graph-transformer
//! blocks (GATv2 message passing fused with global linear attention) embed
//! the query graph. A linear-attention operator then cross-attends those
//! embeddings onto the encoded input functions before an MLP decoder.

pub mod attention;
pub mod autodiff;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod hgt;
pub mod model;
pub mod nn;
pub mod tno;
pub mod train;
pub mod tensor;

pub use error::{GitoError, Result};
pub use tensor::{Precision, Real, Tensor};

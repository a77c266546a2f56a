//! Sparse 3D convolutional networks over voxelized triangle meshes.
//!
//! The pipeline runs from OFF meshes through surface voxelization into
//! [`SparseGrid`]s, which are pushed through rule-book driven sparse
//! convolution, learned projection and max-pooling layers. Networks are
//! trained either as classifiers (softmax log-likelihood) or as embedding
//! models with a cosine triplet ranking loss, and evaluated with
//! retrieval metrics (mAP, interpolated PR curve, AUC).

pub mod dataset;
pub mod error;
pub mod layers;
pub mod losses;
pub mod mesh;
pub mod network;
pub mod optimizer;
pub mod real;
pub mod retrieval;
pub mod sparse_grid;
pub mod synth;
pub mod trainer;
pub mod voxelizer;

pub use error::{Error, Result};
pub use mesh::TriangleMesh;
pub use network::{Network, NetworkSpec};
pub use real::Real;
pub use sparse_grid::{Site, SparseGrid};
pub use voxelizer::{Augmentation, RenderConfig};

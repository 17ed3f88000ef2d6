//! Multi-shape non-rigid correspondence toolkit.
//!
//! The pipeline computes hybrid spectral bases (smoothness + deformation
//! families) per mesh, solves regularized block-diagonal functional maps,
//! aggregates collection context with shape-graph attention, assigns every
//! shape into a shared universe via Sinkhorn normalization, and composes
//! pairwise correspondences that are cycle consistent by construction.
//! Unsupervised losses with analytic gradients and a desk-scale optimizer
//! round out the toolkit, together with metrics and portable file formats.
//!
//! Start with [`pipeline::prepare_shape`] and [`pipeline::match_collection`],
//! or see the `examples/` directory for runnable walkthroughs of every
//! stage.

pub mod assign;
pub mod basis;
pub mod cache;
pub mod cli;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod fmap;
pub mod geodesic;
pub mod graph;
pub mod hungarian;
pub mod io;
pub mod loss;
pub mod mesh;
pub mod pipeline;
pub mod sparse;
pub mod synthetic;

pub use assign::{PointMap, UniverseAssignment};
pub use basis::{HybridBasis, SpectralBasis};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use fmap::FunctionalMap;
pub use mesh::TriangleMesh;

//! Matrix-free reconstruction toolkit for limited-angle cone-beam
//! tomosynthesis: Distance Driven projector, total-variation regularized
//! least squares solved by SGP, lagged-diffusivity fixed point or
//! Chambolle-Pock, a synthetic phantom simulator and image-quality metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod operator;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod regularizers;
pub mod solvers;
pub mod volume;

pub use geometry::{DetectorSpec, Geometry, GeometryConfig, GeometryError, SourceArc, VoxelGrid};
pub use operator::{DenseOperator, LinearOperator};
pub use projector::{back_project, build_dense_operator, forward_project, Projector, ProjectorError};
pub use regularizers::RegularizerConfig;
pub use volume::{ProjectionStack, Volume};

//! Deformable image registration on a discrete MRF, with per-class metric
//! aggregation weights learned from segmentation masks.
//!
//! The registration engine represents a deformation by displacement labels on
//! a sparse control grid, scores candidate displacements with patch
//! dissimilarities (SAD, MI, NCC, DWT) combined by a learned weight vector,
//! minimizes the resulting energy with alpha-expansion moves, and densifies
//! the optimal labeling into a dense field through cubic B-spline FFD.
//!
//! The learning stack treats the unknown deformations as latent variables:
//! a CCCP outer loop alternates loss-augmented imputation with a cutting-plane
//! structured SVM update, producing one weight column per anatomical class.

pub mod deform;
pub mod dice;
pub mod error;
pub mod io;
pub mod lssvm;
pub mod maxflow;
pub mod metrics;
pub mod phantom;
pub mod register;
pub mod solver;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ClassSet, Geometry, SegMask, Volume};

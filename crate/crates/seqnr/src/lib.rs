//! Desk-scale non-rigid structure-from-motion (NRSfM).
//!
//! The pipeline lifts a 2D keypoint sequence to per-frame 3D shapes and
//! rotations, reconstructs the shape sequence through a gated-Toeplitz
//! context layer, and regularizes training with a parameter-free
//! generalized Procrustes alignment layer plus a nuclear-norm penalty on
//! the aligned shape stack. Everything runs on a from-scratch reverse-mode
//! tape so gradients can be checked against finite differences end to end.
//!
//! Module map:
//! - [`linalg`]: dense kernels (Jacobi SVD, orthogonal Procrustes,
//!   Rodrigues, nuclear norm and its subgradient)
//! - [`seq`]: observation/shape/rotation sequence containers
//! - [`gpa`]: iterative Procrustes alignment with a one-step backward rule
//! - [`autodiff`]: reverse-mode tape, primitives, custom nodes, gradcheck
//! - [`model`]: encoder, shape/rotation heads, gated Toeplitz mixer
//! - [`objective`]: training losses and evaluation metrics
//! - [`data`]: synthetic low-rank sequence generation and dataset I/O
//! - [`trainer`]: Adam loop, checkpointing, ablation routing
//! - [`cli`]: the `seqnr` command-line front end

pub mod autodiff;
pub mod cli;
pub mod counters;
pub mod data;
pub mod gpa;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod seq;
pub mod trainer;

pub use linalg::{Mat, RotationMatrix, SvdResult};
pub use seq::{ObservationSequence, RotationSet, ShapeSequence};

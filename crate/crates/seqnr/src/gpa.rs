//! Parameter-free generalized Procrustes alignment of a shape sequence to
//! its evolving mean shape, with a one-step approximate backward pass.
//!
//! Each iteration recomputes the mean of the currently aligned frames and
//! re-solves one rotation per frame from the (centered) input frames to
//! that mean, so the returned rotations always map the centered input
//! directly onto the aligned output. The layer is used as a training-time
//! regularizer only; inference paths never construct it.

use std::fmt;

use crate::counters;
use crate::linalg::{procrustes_rotation, LinalgError, Mat, RotationMatrix};
use crate::seq::{RotationSet, ShapeSequence};

/// Convergence threshold on the Frobenius change of the mean shape.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
/// Iteration cap.
pub const DEFAULT_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum GpaError {
    /// A frame's cross-covariance with the mean has rank < 2.
    DegenerateFrame { frame: usize, source: LinalgError },
    /// Fewer than two frames or fewer than three points.
    TooSmall { frames: usize, points: usize },
}

impl fmt::Display for GpaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GpaError::DegenerateFrame { frame, source } => {
                write!(f, "frame {} is degenerate: {}", frame, source)
            }
            GpaError::TooSmall { frames, points } => {
                write!(f, "alignment needs F >= 2 and P >= 3, got F = {}, P = {}", frames, points)
            }
        }
    }
}

impl std::error::Error for GpaError {}

/// Output of [`gpa_align`].
#[derive(Debug, Clone)]
pub struct GpaResult {
    /// Aligned shapes (centered, rotated onto the converged mean).
    pub aligned: ShapeSequence,
    /// Per-frame rotations mapping the centered input onto `aligned`.
    pub rotations: RotationSet,
    /// Number of rotation-update rounds performed.
    pub iterations: usize,
    /// Alignment residual sum_i |R_i S_i - S_bar|_F^2 after each round.
    pub residual_history: Vec<f64>,
}

/// Arithmetic mean shape over frames.
pub fn mean_shape(shapes: &ShapeSequence) -> Mat {
    let p = shapes.points();
    let mut acc = Mat::zeros(3, p);
    for f in shapes.frames() {
        acc = acc.add(f);
    }
    acc.scale(1.0 / shapes.len() as f64)
}

/// Iterative rotation-only alignment of all frames to the running mean.
///
/// Frames are centered internally (the centroid is not restored; the
/// orthographic pipeline carries no translation). Iteration stops when the
/// mean shape moves less than `tolerance` in Frobenius norm, or after
/// `max_iterations` rounds.
pub fn gpa_align(
    input: &ShapeSequence,
    tolerance: f64,
    max_iterations: usize,
) -> Result<GpaResult, GpaError> {
    counters::bump(&counters::GPA_ALIGN_CALLS);
    let f = input.len();
    let p = input.points();
    if f < 2 || p < 3 {
        return Err(GpaError::TooSmall { frames: f, points: p });
    }
    let centered: Vec<Mat> = input.frames().iter().map(|m| m.center_columns()).collect();
    let mut aligned = centered.clone();
    let mut rotations: Vec<RotationMatrix> =
        (0..f).map(|_| RotationMatrix::identity()).collect();
    let mut residual_history = Vec::new();
    let mut prev_mean: Option<Mat> = None;
    let mut iterations = 0;

    for _ in 0..max_iterations {
        let mean = frame_mean(&aligned);
        if let Some(prev) = &prev_mean {
            if mean.sub(prev).frobenius_norm() < tolerance {
                break;
            }
        }
        for i in 0..f {
            let r = procrustes_rotation(&centered[i], &mean)
                .map_err(|source| GpaError::DegenerateFrame { frame: i, source })?;
            aligned[i] = r.apply(&centered[i]);
            rotations[i] = r;
        }
        let residual: f64 = aligned
            .iter()
            .map(|a| {
                let d = a.sub(&mean);
                let n = d.frobenius_norm();
                n * n
            })
            .sum();
        residual_history.push(residual);
        iterations += 1;
        prev_mean = Some(mean);
    }

    Ok(GpaResult {
        aligned: ShapeSequence::new(aligned),
        rotations: RotationSet::new(rotations),
        iterations,
        residual_history,
    })
}

fn frame_mean(frames: &[Mat]) -> Mat {
    let mut acc = Mat::zeros(frames[0].rows(), frames[0].cols());
    for f in frames {
        acc = acc.add(f);
    }
    acc.scale(1.0 / frames.len() as f64)
}

/// One-step approximate backward pass: the rotations are treated as
/// constants, so the gradient w.r.t. the input of frame i is
/// `R_i^T * upstream_i`. Both gradients use the stacked F x 3P layout.
pub fn gpa_backward(upstream: &Mat, rotations: &RotationSet) -> Mat {
    assert!(upstream.cols() % 3 == 0, "stacked gradient width must be 3P");
    assert_eq!(upstream.rows(), rotations.len(), "gradient/rotation count mismatch");
    let p = upstream.cols() / 3;
    let mut out = Mat::zeros(upstream.rows(), upstream.cols());
    for i in 0..upstream.rows() {
        let g = Mat::from_vec(3, p, upstream.row(i).to_vec());
        let back = rotations.get(i).transpose().apply(&g);
        out.data_mut()[i * 3 * p..(i + 1) * 3 * p].copy_from_slice(back.data());
    }
    out
}

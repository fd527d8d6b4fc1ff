//! Training losses (reprojection data term, nuclear norm on aligned
//! shapes, the mean-shape ablation penalty) and evaluation metrics
//! (MPJPE, Stress, e3D).

use crate::autodiff::{Tape, Tensor};
use crate::gpa::{self, GpaError};
use crate::linalg::{nuclear_norm, procrustes_rotation, Mat};
use crate::seq::{ObservationSequence, RotationSet, ShapeSequence};

/// Loss term weights; the published operating point is alpha 9, beta 0.1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 9.0, beta: 0.1 }
    }
}

/// Per-term loss values; `total` is exactly the weighted sum as computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reprojection: f64,
    pub nuclear: f64,
    pub mean_shape: Option<f64>,
}

/// Frobenius norm (unsquared) of the stacked residual `W - proj(R S)`.
pub fn reprojection_loss(w: &ObservationSequence, r: &RotationSet, s: &ShapeSequence) -> f64 {
    assert_eq!(w.len(), s.len(), "frame count mismatch");
    assert_eq!(w.len(), r.len(), "rotation count mismatch");
    assert_eq!(w.points(), s.points(), "point count mismatch");
    let mut acc = 0.0;
    for i in 0..w.len() {
        let rotated = r.get(i).apply(s.frame(i));
        for row in 0..2 {
            for j in 0..w.points() {
                let d = w.frame(i).get(row, j) - rotated.get(row, j);
                acc += d * d;
            }
        }
    }
    acc.sqrt()
}

/// Tape version of the reprojection term; gradients flow into the
/// rotation tensors and the stacked shape tensor.
pub fn reprojection_loss_node(
    tape: &mut Tape,
    w: &ObservationSequence,
    rotations: &[Tensor],
    s_stacked: &Tensor,
) -> Tensor {
    let f = w.len();
    let p = w.points();
    assert_eq!(rotations.len(), f, "rotation count mismatch");
    assert_eq!(s_stacked.rows, f, "stacked frame count mismatch");
    assert_eq!(s_stacked.cols, 3 * p, "stacked width mismatch");
    let mut residuals = Vec::with_capacity(f);
    for i in 0..f {
        let row = tape.slice_rows(s_stacked, i, 1);
        let shape = tape.reshape(&row, 3, p);
        let rotated = tape.matmul(&rotations[i], &shape);
        let proj = tape.slice_rows(&rotated, 0, 2);
        let w_const = tape.leaf_mat(w.frame(i));
        residuals.push(tape.sub(&w_const, &proj));
    }
    let refs: Vec<&Tensor> = residuals.iter().collect();
    let stacked = tape.concat_rows(&refs);
    tape.frobenius_norm(&stacked)
}

/// Nuclear norm of the aligned stacked sequence (value only).
pub fn nuclear_loss(
    s_tilde: &ShapeSequence,
    tolerance: f64,
    max_iterations: usize,
) -> Result<f64, GpaError> {
    let aligned = gpa::gpa_align(s_tilde, tolerance, max_iterations)?;
    Ok(nuclear_norm(&aligned.aligned.stacked()).expect("aligned shapes are finite"))
}

/// Tape version: alignment node followed by the nuclear-norm node, so the
/// backward pass runs the one-step rule then the `U V^T` subgradient.
pub fn nuclear_loss_node(
    tape: &mut Tape,
    s_stacked: &Tensor,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Tensor, GpaError> {
    let aligned = tape.gpa_align(s_stacked, tolerance, max_iterations)?;
    Ok(tape.nuclear_norm(&aligned))
}

/// Mean-shape alignment penalty `sum_i |(trace(R_i) - 1) / 2|` with
/// `R_i` the best rotation from frame i onto the arithmetic frame mean.
pub fn mean_shape_loss(s: &ShapeSequence) -> Result<f64, GpaError> {
    if s.points() < 3 {
        return Err(GpaError::TooSmall { frames: s.len(), points: s.points() });
    }
    let mean = gpa::mean_shape(s);
    let mut acc = 0.0;
    for i in 0..s.len() {
        let r = procrustes_rotation(s.frame(i), &mean)
            .map_err(|source| GpaError::DegenerateFrame { frame: i, source })?;
        let tr = r.mat().get(0, 0) + r.mat().get(1, 1) + r.mat().get(2, 2);
        acc += ((tr - 1.0) / 2.0).abs();
    }
    Ok(acc)
}

/// Weighted total loss on plain values (logging and tests; the trainer
/// assembles the same terms on the tape).
pub fn total_loss(
    w: &ObservationSequence,
    r: &RotationSet,
    s_tilde: &ShapeSequence,
    weights: &LossWeights,
    gpa_tolerance: f64,
    gpa_max_iterations: usize,
) -> Result<LossBreakdown, GpaError> {
    let reprojection = reprojection_loss(w, r, s_tilde);
    let nuclear = if weights.beta != 0.0 {
        nuclear_loss(s_tilde, gpa_tolerance, gpa_max_iterations)?
    } else {
        0.0
    };
    let total = weights.alpha * reprojection + weights.beta * nuclear;
    Ok(LossBreakdown { total, reprojection, nuclear, mean_shape: None })
}

/// Evaluation protocol for the depth-sign ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FlipMode {
    /// Compare as-is.
    Raw,
    /// Also evaluate with all z coordinates negated and keep the variant
    /// with the lower MPJPE (per sequence).
    BestOfFlip,
}

/// Metric values for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub stress: f64,
    pub e3d: f64,
    /// True when the z-flipped variant was selected.
    pub flipped: bool,
}

/// Mean per-joint position error, averaged over frames.
pub fn mpjpe(s: &ShapeSequence, truth: &ShapeSequence) -> f64 {
    assert_eq!(s.len(), truth.len(), "frame count mismatch");
    assert_eq!(s.points(), truth.points(), "point count mismatch");
    let p = s.points();
    let mut acc = 0.0;
    for i in 0..s.len() {
        let mut frame_acc = 0.0;
        for j in 0..p {
            let dx = s.frame(i).get(0, j) - truth.frame(i).get(0, j);
            let dy = s.frame(i).get(1, j) - truth.frame(i).get(1, j);
            let dz = s.frame(i).get(2, j) - truth.frame(i).get(2, j);
            frame_acc += (dx * dx + dy * dy + dz * dz).sqrt();
        }
        acc += frame_acc / p as f64;
    }
    acc / s.len() as f64
}

/// Relative per-frame Frobenius reconstruction error, averaged over frames.
pub fn e3d(s: &ShapeSequence, truth: &ShapeSequence) -> Result<f64, String> {
    assert_eq!(s.len(), truth.len(), "frame count mismatch");
    assert_eq!(s.points(), truth.points(), "point count mismatch");
    let mut acc = 0.0;
    for i in 0..s.len() {
        let denom = truth.frame(i).frobenius_norm();
        if denom == 0.0 {
            return Err(format!("e3d: ground-truth frame {} has zero norm", i));
        }
        acc += s.frame(i).sub(truth.frame(i)).frobenius_norm() / denom;
    }
    Ok(acc / s.len() as f64)
}

/// Pairwise-distance discrepancy `sum_{j<k} | |S_j - S_k| - |S*_j - S*_k| |
/// / (P (P - 1))`, averaged over frames. The denominator is P(P-1) over
/// the j < k sum, exactly as printed in the formula this follows.
pub fn stress(s: &ShapeSequence, truth: &ShapeSequence) -> f64 {
    assert_eq!(s.len(), truth.len(), "frame count mismatch");
    assert_eq!(s.points(), truth.points(), "point count mismatch");
    let p = s.points();
    assert!(p >= 2, "stress needs P >= 2");
    let dist = |m: &Mat, j: usize, k: usize| -> f64 {
        let dx = m.get(0, j) - m.get(0, k);
        let dy = m.get(1, j) - m.get(1, k);
        let dz = m.get(2, j) - m.get(2, k);
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let mut acc = 0.0;
    for i in 0..s.len() {
        let mut frame_acc = 0.0;
        for j in 0..p {
            for k in (j + 1)..p {
                frame_acc += (dist(s.frame(i), j, k) - dist(truth.frame(i), j, k)).abs();
            }
        }
        acc += frame_acc / (p * (p - 1)) as f64;
    }
    acc / s.len() as f64
}

/// Negates the z row of every frame.
pub fn flip_z(s: &ShapeSequence) -> ShapeSequence {
    ShapeSequence::new(
        s.frames()
            .iter()
            .map(|f| {
                let mut out = f.clone();
                for j in 0..f.cols() {
                    out.set(2, j, -f.get(2, j));
                }
                out
            })
            .collect(),
    )
}

/// Computes all three metrics, optionally picking the better of the raw
/// and z-flipped reconstruction by MPJPE.
pub fn evaluate(
    s: &ShapeSequence,
    truth: &ShapeSequence,
    flip_mode: FlipMode,
) -> Result<MetricReport, String> {
    let raw = MetricReport {
        mpjpe: mpjpe(s, truth),
        stress: stress(s, truth),
        e3d: e3d(s, truth)?,
        flipped: false,
    };
    match flip_mode {
        FlipMode::Raw => Ok(raw),
        FlipMode::BestOfFlip => {
            let flipped_s = flip_z(s);
            let flipped = MetricReport {
                mpjpe: mpjpe(&flipped_s, truth),
                stress: stress(&flipped_s, truth),
                e3d: e3d(&flipped_s, truth)?,
                flipped: true,
            };
            if flipped.mpjpe < raw.mpjpe {
                Ok(flipped)
            } else {
                Ok(raw)
            }
        }
    }
}

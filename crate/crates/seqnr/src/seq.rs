//! Sequence containers shared across the pipeline: 2D observations,
//! 3D shape sequences, and per-frame rotation sets.

use crate::linalg::{Mat, RotationMatrix};

/// F frames of 2D keypoints, each 2 x P.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    frames: Vec<Mat>,
}

impl ObservationSequence {
    pub fn new(frames: Vec<Mat>) -> Self {
        assert!(!frames.is_empty(), "empty observation sequence");
        let p = frames[0].cols();
        for f in &frames {
            assert!(f.rows() == 2 && f.cols() == p, "observation frames must share 2xP");
        }
        ObservationSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn points(&self) -> usize {
        self.frames[0].cols()
    }

    pub fn frame(&self, i: usize) -> &Mat {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Mat] {
        &self.frames
    }

    pub fn window(&self, start: usize, len: usize) -> ObservationSequence {
        ObservationSequence::new(self.frames[start..start + len].to_vec())
    }
}

/// F frames of 3D keypoints, each 3 x P, with a stacked F x 3P view whose
/// row i is the concatenation of frame i's x-, y-, and z-rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSequence {
    frames: Vec<Mat>,
}

impl ShapeSequence {
    pub fn new(frames: Vec<Mat>) -> Self {
        assert!(!frames.is_empty(), "empty shape sequence");
        let p = frames[0].cols();
        for f in &frames {
            assert!(f.rows() == 3 && f.cols() == p, "shape frames must share 3xP");
        }
        ShapeSequence { frames }
    }

    /// Rebuilds frames from an F x 3P stacked matrix.
    pub fn from_stacked(stacked: &Mat) -> Self {
        assert!(stacked.cols() % 3 == 0, "stacked width must be 3P");
        let p = stacked.cols() / 3;
        let frames = (0..stacked.rows())
            .map(|i| Mat::from_vec(3, p, stacked.row(i).to_vec()))
            .collect();
        ShapeSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn points(&self) -> usize {
        self.frames[0].cols()
    }

    pub fn frame(&self, i: usize) -> &Mat {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Mat] {
        &self.frames
    }

    /// F x 3P stacked view (one frame per row). A 3xP row-major frame is
    /// already laid out [x-row, y-row, z-row], so rows are plain copies.
    pub fn stacked(&self) -> Mat {
        let p = self.points();
        let mut data = Vec::with_capacity(self.frames.len() * 3 * p);
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Mat::from_vec(self.frames.len(), 3 * p, data)
    }

    pub fn window(&self, start: usize, len: usize) -> ShapeSequence {
        ShapeSequence::new(self.frames[start..start + len].to_vec())
    }

    /// Applies one rotation per frame.
    pub fn rotate(&self, rotations: &RotationSet) -> ShapeSequence {
        assert_eq!(self.len(), rotations.len(), "frame/rotation count mismatch");
        ShapeSequence::new(
            self.frames
                .iter()
                .zip(rotations.iter())
                .map(|(f, r)| r.apply(f))
                .collect(),
        )
    }
}

/// F elements of SO(3).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSet {
    rotations: Vec<RotationMatrix>,
}

impl RotationSet {
    pub fn new(rotations: Vec<RotationMatrix>) -> Self {
        RotationSet { rotations }
    }

    pub fn identity(n: usize) -> Self {
        RotationSet { rotations: (0..n).map(|_| RotationMatrix::identity()).collect() }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn get(&self, i: usize) -> &RotationMatrix {
        &self.rotations[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RotationMatrix> {
        self.rotations.iter()
    }

    pub fn window(&self, start: usize, len: usize) -> RotationSet {
        RotationSet { rotations: self.rotations[start..start + len].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacked_row_layout_is_xyz_concat() {
        let f0 = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f1 = f0.scale(10.0);
        let seq = ShapeSequence::new(vec![f0, f1]);
        let s = seq.stacked();
        assert_eq!(s.rows(), 2);
        assert_eq!(s.cols(), 6);
        assert_eq!(s.row(0), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.row(1), &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let back = ShapeSequence::from_stacked(&s);
        assert_eq!(back, seq);
    }
}

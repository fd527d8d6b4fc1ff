//! Synthetic low-rank deforming sequences with ground truth, orthographic
//! projection, dataset file I/O, and the training batch schedule.
//!
//! Shapes are built from a small Gaussian basis mixed by low-frequency
//! sinusoidal coefficients, so the stacked ground-truth sequence matrix
//! has rank at most the basis size and the nuclear-norm regularizer has
//! something real to recover. Cameras move along geodesics between random
//! keyframe rotations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{rodrigues, Mat, RotationMatrix};
use crate::seq::{ObservationSequence, RotationSet, ShapeSequence};

/// Documented full-scale batching defaults; desk-scale training overrides
/// them (see the trainer defaults).
pub const FULL_SCALE_SEQUENCE_LENGTH: usize = 32;
pub const FULL_SCALE_BATCH_SIZE: usize = 256;

const DATASET_VERSION: u32 = 1;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// Malformed file, with the parser's line/column context.
    Parse { line: usize, column: usize, message: String },
    Version { found: u32, expected: u32 },
    /// Configuration or usage contract violation.
    Invalid(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "i/o error: {}", e),
            DataError::Parse { line, column, message } => {
                write!(f, "parse error at line {}, column {}: {}", line, column, message)
            }
            DataError::Version { found, expected } => {
                write!(f, "dataset version {} not supported (expected {})", found, expected)
            }
            DataError::Invalid(m) => write!(f, "{}", m),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Generation settings for one dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub points: usize,
    /// Basis shapes mixed into each frame (the rank bound).
    pub basis_count: usize,
    /// Highest sinusoid frequency in the coefficient trajectories;
    /// frequency 0 contributes the constant component.
    pub coefficient_frequencies: usize,
    /// Keyframe spacing (in frames) for camera rotation interpolation.
    pub camera_smoothness: usize,
    /// Standard deviation of the 2D observation noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of independent sequences.
    pub sequences: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            frames: 64,
            points: 15,
            basis_count: 3,
            coefficient_frequencies: 3,
            camera_smoothness: 8,
            noise_sigma: 0.0,
            seed: 0,
            sequences: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames < 2 {
            return Err(DataError::Invalid(format!(
                "generation needs F >= 2 frames, got {}",
                self.frames
            )));
        }
        if self.points < 3 {
            return Err(DataError::Invalid(format!(
                "generation needs P >= 3 points, got {}",
                self.points
            )));
        }
        if self.basis_count < 1 {
            return Err(DataError::Invalid("basis_count must be >= 1".into()));
        }
        if self.camera_smoothness < 1 {
            return Err(DataError::Invalid("camera_smoothness must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::Invalid("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One recorded sequence: observations plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub observations: ObservationSequence,
    pub shapes: Option<ShapeSequence>,
    pub rotations: Option<RotationSet>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn points(&self) -> usize {
        self.sequences[0].observations.points()
    }

    pub fn min_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.observations.len()).min().unwrap_or(0)
    }

    pub fn has_ground_truth(&self) -> bool {
        self.sequences.iter().all(|s| s.shapes.is_some())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> RotationMatrix {
    let q: Vec<f64> = (0..4).map(|_| normal(rng)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let m = Mat::from_vec(
        3,
        3,
        vec![
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    );
    RotationMatrix::new(m).expect("unit quaternion maps to SO(3)")
}

/// Axis-angle of a rotation (inverse of the Rodrigues map).
fn log_rotation(r: &RotationMatrix) -> [f64; 3] {
    let m = r.mat();
    let tr = m.get(0, 0) + m.get(1, 1) + m.get(2, 2);
    let theta = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    if theta < 1e-10 {
        return [0.0, 0.0, 0.0];
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the skew part vanishes; recover the axis from the
        // dominant diagonal of (R + I) / 2.
        let d = [
            (m.get(0, 0) + 1.0) / 2.0,
            (m.get(1, 1) + 1.0) / 2.0,
            (m.get(2, 2) + 1.0) / 2.0,
        ];
        let i = if d[0] >= d[1] && d[0] >= d[2] {
            0
        } else if d[1] >= d[2] {
            1
        } else {
            2
        };
        let mut axis = [0.0; 3];
        axis[i] = d[i].max(0.0).sqrt();
        for j in 0..3 {
            if j != i {
                axis[j] = (m.get(i, j) + m.get(j, i)) / (4.0 * axis[i]);
            }
        }
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        return [axis[0] / n * theta, axis[1] / n * theta, axis[2] / n * theta];
    }
    let s = theta / (2.0 * theta.sin());
    [
        (m.get(2, 1) - m.get(1, 2)) * s,
        (m.get(0, 2) - m.get(2, 0)) * s,
        (m.get(1, 0) - m.get(0, 1)) * s,
    ]
}

/// Geodesic interpolation `exp(u log(R_b R_a^T)) R_a`.
fn slerp_rotation(a: &RotationMatrix, b: &RotationMatrix, u: f64) -> RotationMatrix {
    let rel = b.compose(&a.transpose());
    let v = log_rotation(&rel);
    let partial = rodrigues(&[v[0] * u, v[1] * u, v[2] * u]).expect("finite axis-angle");
    partial.compose(a)
}

/// First two rows of `R S`.
pub fn project_orthographic(s: &Mat, r: &RotationMatrix) -> Mat {
    let rotated = r.apply(s);
    Mat::from_vec(2, s.cols(), rotated.data()[..2 * s.cols()].to_vec())
}

/// Generates `config.sequences` independent sequences with ground truth.
///
/// Deterministic under the seed: one ChaCha stream drives bases,
/// coefficients, cameras, and noise in a fixed order.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let f = config.frames;
    let p = config.points;
    let mut sequences = Vec::with_capacity(config.sequences);

    for seq_index in 0..config.sequences {
        // Centered, unit-Frobenius basis shapes.
        let bases: Vec<Mat> = (0..config.basis_count)
            .map(|_| {
                let raw = Mat::from_vec(3, p, (0..3 * p).map(|_| normal(&mut rng)).collect())
                    .center_columns();
                raw.scale(1.0 / raw.frobenius_norm())
            })
            .collect();

        // Sinusoidal coefficient trajectories; frequency 0 is the
        // constant component.
        let mut coeff_terms = Vec::with_capacity(config.basis_count);
        for _ in 0..config.basis_count {
            let terms: Vec<(f64, f64, f64)> = (0..=config.coefficient_frequencies)
                .map(|freq| {
                    let amplitude = normal(&mut rng);
                    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                    (freq as f64, amplitude, phase)
                })
                .collect();
            coeff_terms.push(terms);
        }
        let coeff = |k: usize, t: usize| -> f64 {
            coeff_terms[k]
                .iter()
                .map(|(freq, a, phi)| {
                    a * (2.0 * std::f64::consts::PI * freq * t as f64 / f as f64 + phi).sin()
                })
                .sum()
        };

        // Camera keyframes every `camera_smoothness` frames.
        let n_keys = (f - 1) / config.camera_smoothness + 2;
        let keys: Vec<RotationMatrix> = (0..n_keys).map(|_| random_rotation(&mut rng)).collect();

        let mut shapes = Vec::with_capacity(f);
        let mut rotations = Vec::with_capacity(f);
        let mut observations = Vec::with_capacity(f);
        for t in 0..f {
            let mut shape = Mat::zeros(3, p);
            for k in 0..config.basis_count {
                shape = shape.add(&bases[k].scale(coeff(k, t)));
            }
            let key = t / config.camera_smoothness;
            let u = (t % config.camera_smoothness) as f64 / config.camera_smoothness as f64;
            let rot = slerp_rotation(&keys[key], &keys[key + 1], u);
            let mut w = project_orthographic(&shape, &rot);
            if config.noise_sigma > 0.0 {
                for v in w.data_mut() {
                    *v += config.noise_sigma * normal(&mut rng);
                }
                w = w.center_columns();
            }
            shapes.push(shape);
            rotations.push(rot);
            observations.push(w);
        }

        let mut metadata = BTreeMap::new();
        metadata.insert("sequence".to_string(), seq_index.to_string());
        metadata.insert("basis_count".to_string(), config.basis_count.to_string());
        metadata.insert("noise_sigma".to_string(), config.noise_sigma.to_string());
        metadata.insert("seed".to_string(), config.seed.to_string());
        sequences.push(SequenceRecord {
            observations: ObservationSequence::new(observations),
            shapes: Some(ShapeSequence::new(shapes)),
            rotations: Some(RotationSet::new(rotations)),
            metadata,
        });
    }

    Ok(Dataset { sequences })
}

// ---------------------------------------------------------------------
// File format: JSON with per-sequence F, P, points2d (F x P x 2),
// optional points3d (F x P x 3), optional rotations (F x 3 x 3).
// ---------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct SequenceFile {
    frames: usize,
    points: usize,
    points2d: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points3d: Option<Vec<Vec<[f64; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotations: Option<Vec<[[f64; 3]; 3]>>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetFile {
    version: u32,
    sequences: Vec<SequenceFile>,
}

fn to_file(d: &Dataset) -> DatasetFile {
    let sequences = d
        .sequences
        .iter()
        .map(|s| {
            let f = s.observations.len();
            let p = s.observations.points();
            let points2d = s
                .observations
                .frames()
                .iter()
                .map(|m| (0..p).map(|j| [m.get(0, j), m.get(1, j)]).collect())
                .collect();
            let points3d = s.shapes.as_ref().map(|shapes| {
                shapes
                    .frames()
                    .iter()
                    .map(|m| (0..p).map(|j| [m.get(0, j), m.get(1, j), m.get(2, j)]).collect())
                    .collect()
            });
            let rotations = s.rotations.as_ref().map(|rs| {
                rs.iter()
                    .map(|r| {
                        let m = r.mat();
                        [
                            [m.get(0, 0), m.get(0, 1), m.get(0, 2)],
                            [m.get(1, 0), m.get(1, 1), m.get(1, 2)],
                            [m.get(2, 0), m.get(2, 1), m.get(2, 2)],
                        ]
                    })
                    .collect()
            });
            SequenceFile {
                frames: f,
                points: p,
                points2d,
                points3d,
                rotations,
                metadata: s.metadata.clone(),
            }
        })
        .collect();
    DatasetFile { version: DATASET_VERSION, sequences }
}

fn from_file(file: DatasetFile) -> Result<Dataset, DataError> {
    if file.version != DATASET_VERSION {
        return Err(DataError::Version { found: file.version, expected: DATASET_VERSION });
    }
    let mut sequences = Vec::with_capacity(file.sequences.len());
    for (idx, s) in file.sequences.into_iter().enumerate() {
        let check = |what: &str, got: usize, want: usize| -> Result<(), DataError> {
            if got != want {
                return Err(DataError::Invalid(format!(
                    "sequence {}: {} has {} entries, expected {}",
                    idx, what, got, want
                )));
            }
            Ok(())
        };
        check("points2d", s.points2d.len(), s.frames)?;
        let observations = ObservationSequence::new(
            s.points2d
                .iter()
                .enumerate()
                .map(|(t, frame)| {
                    check(&format!("points2d[{}]", t), frame.len(), s.points)?;
                    let mut m = Mat::zeros(2, s.points);
                    for (j, xy) in frame.iter().enumerate() {
                        m.set(0, j, xy[0]);
                        m.set(1, j, xy[1]);
                    }
                    Ok(m)
                })
                .collect::<Result<Vec<_>, DataError>>()?,
        );
        let shapes = match s.points3d {
            Some(frames) => {
                check("points3d", frames.len(), s.frames)?;
                Some(ShapeSequence::new(
                    frames
                        .iter()
                        .enumerate()
                        .map(|(t, frame)| {
                            check(&format!("points3d[{}]", t), frame.len(), s.points)?;
                            let mut m = Mat::zeros(3, s.points);
                            for (j, xyz) in frame.iter().enumerate() {
                                m.set(0, j, xyz[0]);
                                m.set(1, j, xyz[1]);
                                m.set(2, j, xyz[2]);
                            }
                            Ok(m)
                        })
                        .collect::<Result<Vec<_>, DataError>>()?,
                ))
            }
            None => None,
        };
        let rotations = match s.rotations {
            Some(rows) => {
                check("rotations", rows.len(), s.frames)?;
                Some(RotationSet::new(
                    rows.iter()
                        .enumerate()
                        .map(|(t, r)| {
                            let m = Mat::from_vec(3, 3, r.iter().flatten().copied().collect());
                            RotationMatrix::new(m).map_err(|e| {
                                DataError::Invalid(format!(
                                    "sequence {} rotation {}: {}",
                                    idx, t, e
                                ))
                            })
                        })
                        .collect::<Result<Vec<_>, DataError>>()?,
                ))
            }
            None => None,
        };
        sequences.push(SequenceRecord { observations, shapes, rotations, metadata: s.metadata });
    }
    if sequences.is_empty() {
        return Err(DataError::Invalid("dataset has no sequences".into()));
    }
    Ok(Dataset { sequences })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string(&to_file(d)).expect("dataset serializes");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    from_file(file)
}

/// Deterministic window schedule: every admissible contiguous window
/// (sequence, start) appears exactly once per epoch, in an order shuffled
/// by (seed, epoch); a training step's batch is a pure function of the
/// step index, so resuming needs no RNG state.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    windows: Vec<(usize, usize)>,
    sequence_length: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(
        d: &Dataset,
        sequence_length: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<BatchSchedule, DataError> {
        if sequence_length < 2 {
            return Err(DataError::Invalid("sequence_length must be >= 2".into()));
        }
        if batch_size < 1 {
            return Err(DataError::Invalid("batch_size must be >= 1".into()));
        }
        let shortest = d.min_frames();
        if sequence_length > shortest {
            return Err(DataError::Invalid(format!(
                "sequence_length {} exceeds the shortest sequence ({} frames)",
                sequence_length, shortest
            )));
        }
        let mut windows = Vec::new();
        for (i, s) in d.sequences.iter().enumerate() {
            for start in 0..=(s.observations.len() - sequence_length) {
                windows.push((i, start));
            }
        }
        Ok(BatchSchedule { windows, sequence_length, batch_size, seed })
    }

    pub fn sequence_length(&self) -> usize {
        self.sequence_length
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.windows.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.batch_size)
    }

    /// Window order for one epoch (Fisher-Yates under (seed, epoch)).
    pub fn epoch_order(&self, epoch: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = self.windows.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// The batch consumed at a global step index.
    pub fn batch(&self, step: usize) -> Vec<(usize, usize)> {
        let bpe = self.batches_per_epoch();
        let epoch = step / bpe;
        let index = step % bpe;
        let order = self.epoch_order(epoch);
        let lo = index * self.batch_size;
        let hi = (lo + self.batch_size).min(order.len());
        order[lo..hi].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpa;
    use crate::linalg::{nuclear_norm, svd};
    use crate::objective::reprojection_loss;

    fn quick_config() -> SyntheticConfig {
        SyntheticConfig {
            frames: 12,
            points: 6,
            basis_count: 2,
            coefficient_frequencies: 2,
            camera_smoothness: 4,
            noise_sigma: 0.0,
            seed: 3,
            sequences: 2,
        }
    }

    #[test]
    fn zero_noise_reprojects_exactly() {
        let d = generate(&quick_config()).unwrap();
        for s in &d.sequences {
            let loss = reprojection_loss(
                &s.observations,
                s.rotations.as_ref().unwrap(),
                s.shapes.as_ref().unwrap(),
            );
            assert_eq!(loss, 0.0);
        }
    }

    #[test]
    fn rigid_config_collapses_under_alignment() {
        let config = SyntheticConfig {
            basis_count: 1,
            coefficient_frequencies: 0,
            sequences: 1,
            ..quick_config()
        };
        let d = generate(&config).unwrap();
        let shapes = d.sequences[0].shapes.as_ref().unwrap();
        let out = gpa::gpa_align(shapes, 1e-8, 100).unwrap();
        let nuc = nuclear_norm(&out.aligned.stacked()).unwrap();
        let fro = out.aligned.stacked().frobenius_norm();
        assert!((nuc - fro).abs() < 1e-6, "nuclear {} vs frobenius {}", nuc, fro);
    }

    #[test]
    fn stacked_ground_truth_rank_bounded_by_basis() {
        let config = quick_config();
        let d = generate(&config).unwrap();
        for s in &d.sequences {
            let stacked = s.shapes.as_ref().unwrap().stacked();
            let f = svd(&stacked).unwrap();
            for (i, sv) in f.sigma.iter().enumerate() {
                if i >= config.basis_count {
                    assert!(
                        *sv < 1e-9 * f.sigma[0],
                        "sigma[{}] = {} too large vs {}",
                        i,
                        sv,
                        f.sigma[0]
                    );
                }
            }
        }
    }

    #[test]
    fn observations_are_centered() {
        let config = SyntheticConfig { noise_sigma: 0.02, ..quick_config() };
        let d = generate(&config).unwrap();
        for s in &d.sequences {
            for frame in s.observations.frames() {
                for row in 0..2 {
                    let centroid: f64 = frame.row(row).iter().sum::<f64>() / frame.cols() as f64;
                    assert!(centroid.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&quick_config()).unwrap();
        let b = generate(&quick_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_examples() {
        let s = Mat::from_vec(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = project_orthographic(&s, &RotationMatrix::identity());
        assert_eq!(w.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // Half turn about x: y negated, x preserved.
        let r = rodrigues(&[std::f64::consts::PI, 0.0, 0.0]).unwrap();
        let w = project_orthographic(&s, &r);
        for j in 0..3 {
            assert!((w.get(0, j) - s.get(0, j)).abs() < 1e-12);
            assert!((w.get(1, j) + s.get(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rotation_inverts_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let v = log_rotation(&r);
            let back = rodrigues(&v).unwrap();
            let diff = back.mat().sub(r.mat()).frobenius_norm();
            assert!(diff < 1e-9, "log/exp mismatch {}", diff);
        }
        // Near a half turn.
        let r = rodrigues(&[0.0, std::f64::consts::PI - 1e-9, 0.0]).unwrap();
        let back = rodrigues(&log_rotation(&r)).unwrap();
        assert!(back.mat().sub(r.mat()).frobenius_norm() < 1e-6);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let config = SyntheticConfig { noise_sigma: 0.01, ..quick_config() };
        let d = generate(&config).unwrap();
        save_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(d, loaded);

        // Same dataset, same bytes.
        let path2 = dir.path().join("d2.json");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn missing_ground_truth_loads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let mut d = generate(&quick_config()).unwrap();
        for s in &mut d.sequences {
            s.shapes = None;
            s.rotations = None;
        }
        save_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(!loaded.has_ground_truth());
    }

    #[test]
    fn truncated_file_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let d = generate(&quick_config()).unwrap();
        save_dataset(&d, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        match load_dataset(&path) {
            Err(DataError::Parse { line, column, .. }) => {
                assert!(line >= 1 && column >= 1);
            }
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let d = generate(&quick_config()).unwrap();
        save_dataset(&d, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"version\":1", "\"version\":9")).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn batch_schedule_covers_every_window_once() {
        assert_eq!(FULL_SCALE_SEQUENCE_LENGTH, 32);
        assert_eq!(FULL_SCALE_BATCH_SIZE, 256);

        let d = generate(&quick_config()).unwrap();
        let schedule = BatchSchedule::new(&d, 5, 3, 11).unwrap();
        // 2 sequences x (12 - 5 + 1) starts.
        assert_eq!(schedule.windows_per_epoch(), 16);
        let mut seen = std::collections::BTreeSet::new();
        for b in 0..schedule.batches_per_epoch() {
            for w in schedule.batch(b) {
                assert!(seen.insert(w), "window {:?} repeated", w);
            }
        }
        assert_eq!(seen.len(), 16);

        // Same seed, same order; the second epoch differs.
        let again = BatchSchedule::new(&d, 5, 3, 11).unwrap();
        assert_eq!(schedule.batch(0), again.batch(0));
        assert_ne!(schedule.epoch_order(0), schedule.epoch_order(1));
    }

    #[test]
    fn batch_schedule_rejects_long_windows() {
        let d = generate(&quick_config()).unwrap();
        assert!(matches!(
            BatchSchedule::new(&d, 13, 3, 0),
            Err(DataError::Invalid(_))
        ));
    }
}

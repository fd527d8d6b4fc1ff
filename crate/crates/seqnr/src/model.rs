//! The learnable pipeline: per-frame encoder with shape/rotation heads,
//! the feature-space map `g`, the gated Toeplitz sequence mixer, and the
//! shape-space remap `g_s`.
//!
//! All forward passes are built on an autodiff [`Tape`]; inference uses
//! the same builders and simply never attaches the alignment node.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::counters;
use crate::linalg::{Mat, RotationMatrix};
use crate::seq::{ObservationSequence, RotationSet, ShapeSequence};

/// Negative slope of the leaky rectifier used everywhere a nonlinearity
/// appears (the shape predictor stays purely linear).
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Keypoints per frame (P).
    pub keypoints: usize,
    /// Feature dimension of the sequence mixer (D).
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Shape basis size (K).
    #[serde(default = "default_basis_count")]
    pub basis_count: usize,
    /// Residual blocks in the encoder.
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: usize,
    /// Encoder hidden width.
    #[serde(default = "default_encoder_width")]
    pub encoder_width: usize,
    /// Affine layers in the shape-space remap.
    #[serde(default = "default_gs_layers")]
    pub gs_layers: usize,
    /// Hidden width of the relative-position network.
    #[serde(default = "default_rpe_width")]
    pub toeplitz_rpe_width: usize,
    /// False selects the all-one series vector (ablation).
    #[serde(default = "default_true")]
    pub use_series_vector: bool,
}

fn default_feature_dim() -> usize {
    128
}
fn default_basis_count() -> usize {
    10
}
fn default_encoder_layers() -> usize {
    6
}
fn default_encoder_width() -> usize {
    256
}
fn default_gs_layers() -> usize {
    4
}
fn default_rpe_width() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(keypoints: usize) -> ModelConfig {
        ModelConfig {
            keypoints,
            feature_dim: default_feature_dim(),
            basis_count: default_basis_count(),
            encoder_layers: default_encoder_layers(),
            encoder_width: default_encoder_width(),
            gs_layers: default_gs_layers(),
            toeplitz_rpe_width: default_rpe_width(),
            use_series_vector: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("keypoints", self.keypoints),
            ("feature_dim", self.feature_dim),
            ("basis_count", self.basis_count),
            ("encoder_layers", self.encoder_layers),
            ("encoder_width", self.encoder_width),
            ("gs_layers", self.gs_layers),
            ("toeplitz_rpe_width", self.toeplitz_rpe_width),
        ];
        for (name, v) in fields {
            if v < 1 {
                return Err(format!("model config: {} must be >= 1", name));
            }
        }
        Ok(())
    }

    /// Total learnable values, in closed form.
    pub fn parameter_count(&self) -> usize {
        let p = self.keypoints;
        let w = self.encoder_width;
        let d = self.feature_dim;
        let k = self.basis_count;
        let h = self.toeplitz_rpe_width;
        let embed = 2 * p * w + w;
        let res = self.encoder_layers * (2 * w * w + 2 * w);
        let shape_head = w * k + k;
        let basis = k * 3 * p;
        let rot_head = w * 3 + 3;
        let g = 3 * p * d;
        let gtu = 3 * d * d + 1 + (h + h + h + 1);
        let glu = 2 * (d * d + d);
        let mlp = (self.gs_layers - 1) * (d * d + d) + d * 3 * p + 3 * p;
        embed + res + shape_head + basis + rot_head + g + gtu + glu + mlp
    }
}

/// One named learnable array.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Named flat arrays of learnable values, in a fixed definition order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl serde::Serialize for ParameterStore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for ParameterStore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<ParamEntry>::deserialize(d)?;
        ParameterStore::from_entries(entries).map_err(serde::de::Error::custom)
    }
}

impl ParameterStore {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<ParameterStore, String> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.values.len() != e.rows * e.cols {
                return Err(format!("parameter {} has inconsistent shape", e.name));
            }
            if !e.values.iter().all(|v| v.is_finite()) {
                return Err(format!("parameter {} has non-finite values", e.name));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(format!("duplicate parameter name {}", e.name));
            }
        }
        Ok(ParameterStore { entries, index })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        &self.entries[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {}", name))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {}", name));
        &mut self.entries[i]
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Xavier-uniform weights, zero biases, decay seeded at 0.9.
    pub fn initialize(config: &ModelConfig, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.keypoints;
        let w = config.encoder_width;
        let d = config.feature_dim;
        let k = config.basis_count;
        let h = config.toeplitz_rpe_width;

        let mut entries: Vec<ParamEntry> = Vec::new();
        let mut xavier = |entries: &mut Vec<ParamEntry>, name: &str, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
            entries.push(ParamEntry { name: name.to_string(), rows, cols, values });
        };
        let zeros = |entries: &mut Vec<ParamEntry>, name: &str, rows: usize, cols: usize| {
            entries.push(ParamEntry {
                name: name.to_string(),
                rows,
                cols,
                values: vec![0.0; rows * cols],
            });
        };

        xavier(&mut entries, "encoder.embed.weight", 2 * p, w);
        zeros(&mut entries, "encoder.embed.bias", 1, w);
        for i in 0..config.encoder_layers {
            xavier(&mut entries, &format!("encoder.res{}.fc1.weight", i), w, w);
            zeros(&mut entries, &format!("encoder.res{}.fc1.bias", i), 1, w);
            xavier(&mut entries, &format!("encoder.res{}.fc2.weight", i), w, w);
            zeros(&mut entries, &format!("encoder.res{}.fc2.bias", i), 1, w);
        }
        xavier(&mut entries, "shape_head.weight", w, k);
        zeros(&mut entries, "shape_head.bias", 1, k);
        xavier(&mut entries, "basis", k, 3 * p);
        xavier(&mut entries, "rot_head.weight", w, 3);
        zeros(&mut entries, "rot_head.bias", 1, 3);
        xavier(&mut entries, "g.weight", 3 * p, d);
        xavier(&mut entries, "gtu.w_u", d, d);
        xavier(&mut entries, "gtu.w_v", d, d);
        xavier(&mut entries, "gtu.w_o", d, d);
        // Logistic reparameterization: sigmoid(ln 9) = 0.9.
        entries.push(ParamEntry {
            name: "gtu.decay".to_string(),
            rows: 1,
            cols: 1,
            values: vec![9.0f64.ln()],
        });
        xavier(&mut entries, "gtu.rpe.fc1.weight", 1, h);
        zeros(&mut entries, "gtu.rpe.fc1.bias", 1, h);
        xavier(&mut entries, "gtu.rpe.fc2.weight", h, 1);
        zeros(&mut entries, "gtu.rpe.fc2.bias", 1, 1);
        xavier(&mut entries, "gs.glu.a.weight", d, d);
        zeros(&mut entries, "gs.glu.a.bias", 1, d);
        xavier(&mut entries, "gs.glu.b.weight", d, d);
        zeros(&mut entries, "gs.glu.b.bias", 1, d);
        for i in 0..config.gs_layers {
            let (rows, cols) = if i + 1 == config.gs_layers { (d, 3 * p) } else { (d, d) };
            xavier(&mut entries, &format!("gs.mlp{}.weight", i), rows, cols);
            zeros(&mut entries, &format!("gs.mlp{}.bias", i), 1, cols);
        }

        ParameterStore::from_entries(entries).expect("generated store is consistent")
    }
}

/// Temporal index vector feeding the Toeplitz coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesVector {
    values: Vec<f64>,
}

impl SeriesVector {
    /// The standard [1, 2, ..., F].
    pub fn arithmetic(f: usize) -> SeriesVector {
        SeriesVector { values: (1..=f).map(|i| i as f64).collect() }
    }

    /// All ones (drops temporal order entirely).
    pub fn all_ones(f: usize) -> SeriesVector {
        SeriesVector { values: vec![1.0; f] }
    }

    pub fn for_config(config: &ModelConfig, f: usize) -> SeriesVector {
        if config.use_series_vector {
            SeriesVector::arithmetic(f)
        } else {
            SeriesVector::all_ones(f)
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Leaf tensors for every parameter on one tape, in store order.
pub struct Bindings {
    ordered: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.ordered[*self.index.get(name).unwrap_or_else(|| panic!("no binding {}", name))].1
    }

    pub fn ordered(&self) -> &[(String, Tensor)] {
        &self.ordered
    }
}

/// Loads every parameter onto the tape as a differentiable leaf.
pub fn bind_parameters(tape: &mut Tape, store: &ParameterStore) -> Bindings {
    bind_parameters_with(tape, store, None)
}

/// Same as [`bind_parameters`] but substituting one named tensor
/// (used by the per-parameter gradient checker).
pub fn bind_parameters_with(
    tape: &mut Tape,
    store: &ParameterStore,
    replace: Option<(&str, &Tensor)>,
) -> Bindings {
    let mut ordered = Vec::with_capacity(store.entries().len());
    let mut index = HashMap::new();
    for e in store.entries() {
        let tensor = match replace {
            Some((name, t)) if name == e.name => {
                assert_eq!((t.rows, t.cols), (e.rows, e.cols), "override shape mismatch");
                match t.node() {
                    Some(_) => t.clone(),
                    None => tape.leaf(t),
                }
            }
            _ => tape.leaf(&Tensor::matrix(e.rows, e.cols, e.values.clone())),
        };
        index.insert(e.name.clone(), ordered.len());
        ordered.push((e.name.clone(), tensor));
    }
    Bindings { ordered, index }
}

fn affine(tape: &mut Tape, x: &Tensor, binds: &Bindings, prefix: &str) -> Tensor {
    let w = binds.get(&format!("{}.weight", prefix));
    let b = binds.get(&format!("{}.bias", prefix)).clone();
    let h = tape.matmul(x, w);
    tape.add_row(&h, &b)
}

/// Per-frame encoder: input embedding plus residual blocks
/// (linear, leaky rectifier, linear, skip). Frames are the rows of
/// `w_rows`, each flattened to [x-row, y-row].
pub fn encode(tape: &mut Tape, binds: &Bindings, w_rows: &Tensor) -> Tensor {
    let mut h = affine(tape, w_rows, binds, "encoder.embed");
    let blocks = binds
        .ordered()
        .iter()
        .filter(|(n, _)| n.starts_with("encoder.res") && n.ends_with("fc1.weight"))
        .count();
    for i in 0..blocks {
        let a = affine(tape, &h, binds, &format!("encoder.res{}.fc1", i));
        let a = tape.leaky_relu(&a, LEAKY_SLOPE);
        let a = affine(tape, &a, binds, &format!("encoder.res{}.fc2", i));
        h = tape.add(&h, &a);
    }
    h
}

/// Two purely linear stages: coefficients from the features, then the
/// basis combination, one stacked frame per row.
pub fn predict_shape(tape: &mut Tape, binds: &Bindings, features: &Tensor) -> Tensor {
    let coeffs = affine(tape, features, binds, "shape_head");
    let basis = binds.get("basis");
    tape.matmul(&coeffs, basis)
}

/// Rotation head: a linear layer to an axis-angle vector, converted by
/// the Rodrigues formula composed from tape primitives.
pub fn predict_rotation(tape: &mut Tape, binds: &Bindings, features: &Tensor) -> Vec<Tensor> {
    let vecs = affine(tape, features, binds, "rot_head");
    let eye = Tensor::from_mat(&Mat::identity(3));
    (0..vecs.rows)
        .map(|i| {
            let v = tape.slice_rows(&vecs, i, 1);
            let vv = tape.hadamard(&v, &v);
            let sq = tape.sum(&vv);
            let a = tape.sinc_sq(&sq);
            let b = tape.versine_sq(&sq);
            let k = tape.cross_matrix(&v);
            let kk = tape.matmul(&k, &k);
            let t1 = tape.scalar_mul(&a, &k);
            let t2 = tape.scalar_mul(&b, &kk);
            let e = tape.leaf(&eye);
            let r = tape.add(&e, &t1);
            tape.add(&r, &t2)
        })
        .collect()
}

/// Coefficients of the sequence mixer over the distinct relative offsets
/// of `l`: `t(k) = decay^|k| * rpe(k / F)` with a learnable decay in
/// (0, 1) via logistic reparameterization.
pub struct ToeplitzCoefficients {
    /// Distinct value differences `l_i - l_j`, ascending.
    pub offsets: Vec<i64>,
    /// One coefficient per offset (len(offsets) x 1).
    pub coeffs: Tensor,
}

pub fn toeplitz_coefficients(
    tape: &mut Tape,
    binds: &Bindings,
    l: &SeriesVector,
) -> ToeplitzCoefficients {
    let f = l.len();
    let mut offsets: Vec<i64> = Vec::new();
    for i in 0..f {
        for j in 0..f {
            let d = (l.values()[i] - l.values()[j]).round() as i64;
            if !offsets.contains(&d) {
                offsets.push(d);
            }
        }
    }
    offsets.sort_unstable();

    let decay_raw = binds.get("gtu.decay").clone();
    let decay = tape.sigmoid(&decay_raw);
    let pows: Vec<Tensor> =
        offsets.iter().map(|&k| tape.powi(&decay, k.unsigned_abs() as i32)).collect();
    let pow_refs: Vec<&Tensor> = pows.iter().collect();
    let decay_pows = tape.concat_rows(&pow_refs);

    let rel: Vec<f64> = offsets.iter().map(|&k| k as f64 / f as f64).collect();
    let r = tape.leaf(&Tensor::matrix(offsets.len(), 1, rel));
    let h = affine(tape, &r, binds, "gtu.rpe.fc1");
    let h = tape.leaky_relu(&h, LEAKY_SLOPE);
    let rpe = affine(tape, &h, binds, "gtu.rpe.fc2");

    let coeffs = tape.hadamard(&decay_pows, &rpe);
    ToeplitzCoefficients { offsets, coeffs }
}

/// F x F mixing matrix with `T[i][j] = t(l_i - l_j)`; Toeplitz whenever
/// `l` is the arithmetic series.
pub fn toeplitz_matrix(tape: &mut Tape, binds: &Bindings, l: &SeriesVector) -> Tensor {
    let f = l.len();
    let tc = toeplitz_coefficients(tape, binds, l);
    let mut map = Vec::with_capacity(f * f);
    for i in 0..f {
        for j in 0..f {
            let d = (l.values()[i] - l.values()[j]).round() as i64;
            let idx = tc.offsets.binary_search(&d).expect("offset seen during construction");
            map.push(idx);
        }
    }
    tape.gather(&tc.coeffs, &map, f, f)
}

/// Gated Toeplitz unit with an explicit mixing matrix:
/// `W_o((T (X W_v)) .* sigmoid(X W_u))`. No additive term follows the mix.
pub fn gtu_mix_with(tape: &mut Tape, binds: &Bindings, x: &Tensor, t: &Tensor) -> Tensor {
    counters::bump(&counters::GTU_MIX_CALLS);
    let pre_gate = tape.matmul(x, binds.get("gtu.w_u"));
    let gate = tape.sigmoid(&pre_gate);
    let v = tape.matmul(x, binds.get("gtu.w_v"));
    let mixed = tape.matmul(t, &v);
    let gated = tape.hadamard(&mixed, &gate);
    tape.matmul(&gated, binds.get("gtu.w_o"))
}

/// Gated Toeplitz unit over features in sequence order.
pub fn gtu_mix(tape: &mut Tape, binds: &Bindings, x: &Tensor, l: &SeriesVector) -> Tensor {
    let t = toeplitz_matrix(tape, binds, l);
    gtu_mix_with(tape, binds, x, &t)
}

/// Shape-space remap `g_s`: a gated linear unit followed by an MLP whose
/// last layer is linear, producing one stacked 3P frame per row.
pub fn remap_gs(tape: &mut Tape, binds: &Bindings, x: &Tensor) -> Tensor {
    let a = affine(tape, x, binds, "gs.glu.a");
    let b = affine(tape, x, binds, "gs.glu.b");
    let gate = tape.sigmoid(&b);
    let mut h = tape.hadamard(&a, &gate);
    let layers = binds
        .ordered()
        .iter()
        .filter(|(n, _)| n.starts_with("gs.mlp") && n.ends_with("weight"))
        .count();
    for i in 0..layers {
        h = affine(tape, &h, binds, &format!("gs.mlp{}", i));
        if i + 1 < layers {
            h = tape.leaky_relu(&h, LEAKY_SLOPE);
        }
    }
    h
}

/// Everything the forward pass produces on the tape.
pub struct PipelineOutputs {
    pub features: Tensor,
    /// Stacked F x 3P single-frame predictions.
    pub s_prime: Tensor,
    /// Stacked F x 3P reconstructed sequence (equals `s_prime` when the
    /// context layer is bypassed).
    pub s_tilde: Tensor,
    /// One 3x3 rotation tensor per frame.
    pub rotations: Vec<Tensor>,
}

/// Centers each observation frame and flattens it to a row [x, y].
pub fn observation_rows(w: &ObservationSequence) -> Mat {
    let p = w.points();
    let mut data = Vec::with_capacity(w.len() * 2 * p);
    for f in w.frames() {
        data.extend_from_slice(f.center_columns().data());
    }
    Mat::from_vec(w.len(), 2 * p, data)
}

/// Full forward pass: per-frame lifting, then (unless bypassed) the
/// context layer `g_s(H(g(S'), L) g(S'))`. Alignment is not applied
/// here; it only appears inside the training loss.
pub fn forward_pipeline(
    tape: &mut Tape,
    binds: &Bindings,
    w: &ObservationSequence,
    l: &SeriesVector,
    use_context: bool,
) -> PipelineOutputs {
    assert!(w.len() >= 2, "pipeline needs F >= 2");
    assert_eq!(w.len(), l.len(), "series vector length mismatch");
    let rows = tape.leaf_mat(&observation_rows(w));
    let features = encode(tape, binds, &rows);
    let s_prime = predict_shape(tape, binds, &features);
    let rotations = predict_rotation(tape, binds, &features);
    let s_tilde = if use_context {
        let x = tape.matmul(&s_prime, binds.get("g.weight"));
        let mixed = gtu_mix(tape, binds, &x, l);
        remap_gs(tape, binds, &mixed)
    } else {
        s_prime.clone()
    };
    PipelineOutputs { features, s_prime, s_tilde, rotations }
}

/// Value-level inference on a throwaway tape.
pub fn infer(
    store: &ParameterStore,
    w: &ObservationSequence,
    l: &SeriesVector,
    use_context: bool,
) -> (ShapeSequence, ShapeSequence, RotationSet) {
    let mut tape = Tape::new();
    let binds = bind_parameters(&mut tape, store);
    let out = forward_pipeline(&mut tape, &binds, w, l, use_context);
    let s_prime = ShapeSequence::from_stacked(&out.s_prime.to_mat());
    let s_tilde = ShapeSequence::from_stacked(&out.s_tilde.to_mat());
    let rotations = RotationSet::new(
        out.rotations
            .iter()
            .map(|r| RotationMatrix::new(r.to_mat()).expect("rotation head output is in SO(3)"))
            .collect(),
    );
    (s_prime, s_tilde, rotations)
}

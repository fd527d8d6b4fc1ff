//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation (tag, input node ids, saved forward
//! values) in topological order; [`backward`] walks it once in reverse and
//! accumulates vector-Jacobian products by summation, so fan-out (using a
//! tensor twice) just works. Custom nodes cover the nuclear norm (backward
//! is the `U V^T` subgradient) and the Procrustes alignment layer
//! (backward is the one-step rule with frozen rotations).
//!
//! A tape is single-writer: one forward/backward pass owns it. Distinct
//! tapes on distinct inputs may run in parallel; gradient maps are merged
//! outside the tape.

use crate::counters;
use crate::gpa::{self, GpaError};
use crate::linalg::{self, Mat};
use crate::seq::{RotationSet, ShapeSequence};

pub type NodeId = usize;

/// Dense 2-D tensor. `node` is set when the value lives on a tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data, node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::matrix(1, 1, vec![v])
    }

    pub fn from_mat(m: &Mat) -> Tensor {
        Tensor::matrix(m.rows(), m.cols(), m.data().to_vec())
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn value(&self) -> f64 {
        assert!(self.is_scalar(), "value() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Detached copy not associated with any tape.
    pub fn detach(&self) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.clone(), node: None }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    /// scalar * tensor, both on the tape
    ScalarMul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    /// out[m] = in[map[m]]
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Powi(NodeId, i32),
    /// sin(sqrt(x)) / sqrt(x), smooth at 0
    SincSq(NodeId),
    /// (1 - cos(sqrt(x))) / x, smooth at 0
    VersineSq(NodeId),
    /// matrix + row vector broadcast over rows
    AddRow(NodeId, NodeId),
    Frobenius(NodeId),
    /// 3-vector to its cross-product matrix
    CrossMatrix(NodeId),
    NuclearNorm(NodeId),
    /// Procrustes alignment; backward applies the frozen rotations
    Gpa(NodeId, RotationSet),
    /// Mean-shape trace penalty; locally constant under frozen rotations
    MeanShapePenalty,
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sinc_sq(x: f64) -> f64 {
    if x < 1e-6 {
        1.0 - x / 6.0 + x * x / 120.0 - x * x * x / 5040.0
    } else {
        let t = x.sqrt();
        t.sin() / t
    }
}

fn sinc_sq_deriv(x: f64) -> f64 {
    if x < 1e-6 {
        -1.0 / 6.0 + x / 60.0 - x * x / 1680.0
    } else {
        let t = x.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * t * t * t)
    }
}

fn versine_sq(x: f64) -> f64 {
    if x < 1e-6 {
        0.5 - x / 24.0 + x * x / 720.0 - x * x * x / 40320.0
    } else {
        (1.0 - x.sqrt().cos()) / x
    }
}

fn versine_sq_deriv(x: f64) -> f64 {
    if x < 1e-6 {
        -1.0 / 24.0 + x / 360.0 - x * x / 13440.0
    } else {
        let t = x.sqrt();
        (t * t.sin() - 2.0 * (1.0 - t.cos())) / (2.0 * x * x)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Tensor {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        let tensor = Tensor { rows, cols, data: value.clone(), node: Some(id) };
        self.nodes.push(Node { op, rows, cols, value });
        tensor
    }

    /// Node id of a tensor, creating a leaf for constants.
    fn id_of(&mut self, t: &Tensor) -> NodeId {
        match t.node {
            Some(id) => {
                assert!(id < self.nodes.len(), "tensor from another tape");
                id
            }
            None => {
                let id = self.nodes.len();
                self.nodes.push(Node {
                    op: Op::Leaf,
                    rows: t.rows,
                    cols: t.cols,
                    value: t.data.clone(),
                });
                id
            }
        }
    }

    /// Registers a differentiable input and returns its tape handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            rows: t.rows,
            cols: t.cols,
            value: t.data.clone(),
        });
        Tensor { rows: t.rows, cols: t.cols, data: t.data.clone(), node: Some(id) }
    }

    pub fn leaf_mat(&mut self, m: &Mat) -> Tensor {
        self.leaf(&Tensor::from_mat(m))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        let v = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        self.push(Op::Add(ia, ib), a.rows, a.cols, v)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        let v = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(ia, ib), a.rows, a.cols, v)
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "hadamard shape mismatch");
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        let v = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        self.push(Op::Hadamard(ia, ib), a.rows, a.cols, v)
    }

    pub fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|x| x * s).collect();
        self.push(Op::Scale(ia, s), a.rows, a.cols, v)
    }

    /// Scalar tensor times arbitrary tensor.
    pub fn scalar_mul(&mut self, s: &Tensor, a: &Tensor) -> Tensor {
        assert!(s.is_scalar(), "scalar_mul needs a 1x1 left operand");
        let (is, ia) = (self.id_of(s), self.id_of(a));
        let sv = s.data[0];
        let v = a.data.iter().map(|x| sv * x).collect();
        self.push(Op::ScalarMul(is, ia), a.rows, a.cols, v)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(
            a.cols, b.rows,
            "matmul shape mismatch {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        let v = matmul_nn(&a.data, a.rows, a.cols, &b.data, b.cols);
        self.push(Op::Matmul(ia, ib), a.rows, b.cols, v)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let mut v = vec![0.0; a.data.len()];
        for i in 0..a.rows {
            for j in 0..a.cols {
                v[j * a.rows + i] = a.data[i * a.cols + j];
            }
        }
        self.push(Op::Transpose(ia), a.cols, a.rows, v)
    }

    pub fn reshape(&mut self, a: &Tensor, rows: usize, cols: usize) -> Tensor {
        assert_eq!(a.data.len(), rows * cols, "reshape size mismatch");
        let ia = self.id_of(a);
        self.push(Op::Reshape(ia), rows, cols, a.data.clone())
    }

    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = parts[0].cols;
        let mut ids = Vec::with_capacity(parts.len());
        let mut rows = 0;
        let mut v = Vec::new();
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows column mismatch");
            ids.push(self.id_of(p));
            rows += p.rows;
            v.extend_from_slice(&p.data);
        }
        self.push(Op::ConcatRows(ids), rows, cols, v)
    }

    pub fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Tensor {
        assert!(start + len <= a.rows, "slice_rows out of range");
        let ia = self.id_of(a);
        let v = a.data[start * a.cols..(start + len) * a.cols].to_vec();
        self.push(Op::SliceRows(ia, start), len, a.cols, v)
    }

    /// out[m] = in[map[m]], with the output shape given explicitly.
    pub fn gather(&mut self, a: &Tensor, map: &[usize], rows: usize, cols: usize) -> Tensor {
        assert_eq!(map.len(), rows * cols, "gather map length mismatch");
        let ia = self.id_of(a);
        let v = map
            .iter()
            .map(|&src| {
                assert!(src < a.data.len(), "gather index out of range");
                a.data[src]
            })
            .collect();
        self.push(Op::Gather(ia, map.to_vec()), rows, cols, v)
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().sum();
        self.push(Op::Sum(ia), 1, 1, vec![v])
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().sum::<f64>() / a.data.len() as f64;
        self.push(Op::Mean(ia), 1, 1, vec![v])
    }

    pub fn sin(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|x| x.sin()).collect();
        self.push(Op::Sin(ia), a.rows, a.cols, v)
    }

    pub fn cos(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|x| x.cos()).collect();
        self.push(Op::Cos(ia), a.rows, a.cols, v)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt(ia), a.rows, a.cols, v)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(ia), a.rows, a.cols, v)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(ia), a.rows, a.cols, v)
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        self.push(Op::LeakyRelu(ia, slope), a.rows, a.cols, v)
    }

    /// Elementwise integer power (exponent fixed, not on the tape).
    pub fn powi(&mut self, a: &Tensor, n: i32) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|x| x.powi(n)).collect();
        self.push(Op::Powi(ia, n), a.rows, a.cols, v)
    }

    /// Elementwise sin(sqrt(x))/sqrt(x); finite value and derivative at 0.
    pub fn sinc_sq(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|&x| sinc_sq(x)).collect();
        self.push(Op::SincSq(ia), a.rows, a.cols, v)
    }

    /// Elementwise (1 - cos(sqrt(x)))/x; finite value and derivative at 0.
    pub fn versine_sq(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|&x| versine_sq(x)).collect();
        self.push(Op::VersineSq(ia), a.rows, a.cols, v)
    }

    /// Broadcast-adds a 1 x n row vector to every row of an m x n matrix.
    pub fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Tensor {
        assert!(row.rows == 1 && row.cols == a.cols, "add_row shape mismatch");
        let (ia, ir) = (self.id_of(a), self.id_of(row));
        let mut v = a.data.clone();
        for i in 0..a.rows {
            for j in 0..a.cols {
                v[i * a.cols + j] += row.data[j];
            }
        }
        self.push(Op::AddRow(ia, ir), a.rows, a.cols, v)
    }

    /// Frobenius norm; subgradient 0 at the exact zero matrix.
    pub fn frobenius_norm(&mut self, a: &Tensor) -> Tensor {
        let ia = self.id_of(a);
        let v = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Op::Frobenius(ia), 1, 1, vec![v])
    }

    /// 3-vector (1x3 or 3x1) to its cross-product matrix.
    pub fn cross_matrix(&mut self, a: &Tensor) -> Tensor {
        assert_eq!(a.data.len(), 3, "cross_matrix wants a 3-vector");
        let ia = self.id_of(a);
        let v = &a.data;
        let m = vec![0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0];
        self.push(Op::CrossMatrix(ia), 3, 3, m)
    }

    /// Nuclear norm node: forward is the sum of singular values, backward
    /// is the upstream scalar times the `U V^T` subgradient.
    pub fn nuclear_norm(&mut self, a: &Tensor) -> Tensor {
        counters::bump(&counters::NUCLEAR_NODE_CALLS);
        let ia = self.id_of(a);
        let v = linalg::nuclear_norm(&a.to_mat()).expect("nuclear norm on non-finite input");
        self.push(Op::NuclearNorm(ia), 1, 1, vec![v])
    }

    /// Procrustes alignment node over a stacked F x 3P shape sequence.
    /// Backward treats the solved rotations as constants (one-step rule).
    pub fn gpa_align(
        &mut self,
        a: &Tensor,
        tolerance: f64,
        max_iterations: usize,
    ) -> Result<Tensor, GpaError> {
        let ia = self.id_of(a);
        let seq = ShapeSequence::from_stacked(&a.to_mat());
        let result = gpa::gpa_align(&seq, tolerance, max_iterations)?;
        let stacked = result.aligned.stacked();
        Ok(self.push(
            Op::Gpa(ia, result.rotations),
            stacked.rows(),
            stacked.cols(),
            stacked.data().to_vec(),
        ))
    }

    /// Mean-shape trace penalty over a stacked F x 3P shape sequence.
    /// With the rotations frozen (mirroring the alignment layer's one-step
    /// rule) the penalty is locally constant, so backward contributes zero.
    pub fn mean_shape_penalty(&mut self, a: &Tensor) -> Result<Tensor, GpaError> {
        let seq = ShapeSequence::from_stacked(&a.to_mat());
        let v = crate::objective::mean_shape_loss(&seq)?;
        Ok(self.push(Op::MeanShapePenalty, 1, 1, vec![v]))
    }
}

fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    out
}

/// C += A * B^T where A is m x k, B is n x k, C is m x n.
fn matmul_nt_acc(c: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            c_row[j] += acc;
        }
    }
}

/// C += A^T * B where A is m x k, B is m x n, C is k x n.
fn matmul_tn_acc(c: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += aik * b_row[j];
            }
        }
    }
}

/// Per-node gradients produced by [`backward`].
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    /// Gradient for a tape tensor; zeros if the node was never reached.
    pub fn get(&self, t: &Tensor) -> Vec<f64> {
        let id = t.node().expect("gradient of a tensor that is not on the tape");
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; t.data.len()],
        }
    }

    pub fn get_mat(&self, t: &Tensor) -> Mat {
        Mat::from_vec(t.rows, t.cols, self.get(t))
    }
}

/// Reverse pass from a scalar root. Every ancestor node receives the sum
/// of its vector-Jacobian products; untouched nodes report zero.
pub fn backward(tape: &Tape, root: &Tensor) -> GradientMap {
    assert!(root.is_scalar(), "backward root must be a scalar");
    let root_id = root.node().expect("backward root must be on the tape");
    let mut grads: Vec<Option<Vec<f64>>> = (0..tape.nodes.len()).map(|_| None).collect();
    grads[root_id] = Some(vec![1.0]);

    for id in (0..=root_id).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &tape.nodes[id];
        let touch = |grads: &mut Vec<Option<Vec<f64>>>, target: NodeId| {
            let len = tape.nodes[target].value.len();
            if grads[target].is_none() {
                grads[target] = Some(vec![0.0; len]);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                touch(&mut grads, *a);
                for (o, gi) in grads[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi;
                }
                touch(&mut grads, *b);
                for (o, gi) in grads[*b].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi;
                }
            }
            Op::Sub(a, b) => {
                touch(&mut grads, *a);
                for (o, gi) in grads[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi;
                }
                touch(&mut grads, *b);
                for (o, gi) in grads[*b].as_mut().unwrap().iter_mut().zip(&g) {
                    *o -= gi;
                }
            }
            Op::Hadamard(a, b) => {
                touch(&mut grads, *a);
                {
                    let bv = &tape.nodes[*b].value;
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                touch(&mut grads, *b);
                {
                    let av = &tape.nodes[*a].value;
                    let gb = grads[*b].as_mut().unwrap();
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                touch(&mut grads, *a);
                for (o, gi) in grads[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi * s;
                }
            }
            Op::ScalarMul(s, a) => {
                let sv = tape.nodes[*s].value[0];
                touch(&mut grads, *s);
                {
                    let av = &tape.nodes[*a].value;
                    let gs = grads[*s].as_mut().unwrap();
                    gs[0] += g.iter().zip(av).map(|(gi, x)| gi * x).sum::<f64>();
                }
                touch(&mut grads, *a);
                for (o, gi) in grads[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi * sv;
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (tape.nodes[*a].rows, tape.nodes[*a].cols);
                let n = tape.nodes[*b].cols;
                touch(&mut grads, *a);
                {
                    let bv = &tape.nodes[*b].value;
                    let ga = grads[*a].as_mut().unwrap();
                    matmul_nt_acc(ga, &g, m, n, bv, k);
                }
                touch(&mut grads, *b);
                {
                    let av = &tape.nodes[*a].value;
                    let gb = grads[*b].as_mut().unwrap();
                    matmul_tn_acc(gb, av, m, k, &g, n);
                }
            }
            Op::Transpose(a) => {
                let (rows, cols) = (node.rows, node.cols);
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..rows {
                    for j in 0..cols {
                        ga[j * rows + i] += g[i * cols + j];
                    }
                }
            }
            Op::Reshape(a) => {
                touch(&mut grads, *a);
                for (o, gi) in grads[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.cols;
                let mut offset = 0;
                for part in parts {
                    let rows = tape.nodes[*part].rows;
                    touch(&mut grads, *part);
                    let gp = grads[*part].as_mut().unwrap();
                    for (o, gi) in gp.iter_mut().zip(&g[offset..offset + rows * cols]) {
                        *o += gi;
                    }
                    offset += rows * cols;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = node.cols;
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for (o, gi) in ga[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                    *o += gi;
                }
            }
            Op::Gather(a, map) => {
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for (m, gi) in map.iter().zip(&g) {
                    ga[*m] += gi;
                }
            }
            Op::Sum(a) => {
                touch(&mut grads, *a);
                for o in grads[*a].as_mut().unwrap().iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let n = tape.nodes[*a].value.len() as f64;
                touch(&mut grads, *a);
                for o in grads[*a].as_mut().unwrap().iter_mut() {
                    *o += g[0] / n;
                }
            }
            Op::Sin(a) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * av[i].cos();
                }
            }
            Op::Cos(a) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] -= g[i] * av[i].sin();
                }
            }
            Op::Sqrt(a) => {
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] / (2.0 * node.value[i]);
                }
            }
            Op::Sigmoid(a) => {
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    let y = node.value[i];
                    ga[i] += g[i] * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Powi(a, n) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * (*n as f64) * av[i].powi(n - 1);
                }
            }
            Op::SincSq(a) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * sinc_sq_deriv(av[i]);
                }
            }
            Op::VersineSq(a) => {
                touch(&mut grads, *a);
                let av = &tape.nodes[*a].value;
                let ga = grads[*a].as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * versine_sq_deriv(av[i]);
                }
            }
            Op::AddRow(a, r) => {
                let cols = node.cols;
                let rows = node.rows;
                touch(&mut grads, *a);
                for (o, gi) in grads[*a].as_mut().unwrap().iter_mut().zip(&g) {
                    *o += gi;
                }
                touch(&mut grads, *r);
                let gr = grads[*r].as_mut().unwrap();
                for i in 0..rows {
                    for j in 0..cols {
                        gr[j] += g[i * cols + j];
                    }
                }
            }
            Op::Frobenius(a) => {
                let norm = node.value[0];
                if norm > 0.0 {
                    touch(&mut grads, *a);
                    let av = &tape.nodes[*a].value;
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..av.len() {
                        ga[i] += g[0] * av[i] / norm;
                    }
                }
            }
            Op::CrossMatrix(a) => {
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                ga[0] += g[7] - g[5];
                ga[1] += g[2] - g[6];
                ga[2] += g[3] - g[1];
            }
            Op::NuclearNorm(a) => {
                let input = Mat::from_vec(
                    tape.nodes[*a].rows,
                    tape.nodes[*a].cols,
                    tape.nodes[*a].value.clone(),
                );
                let sub =
                    linalg::nuclear_norm_subgrad(&input).expect("subgradient of non-finite input");
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for (o, s) in ga.iter_mut().zip(sub.data()) {
                    *o += g[0] * s;
                }
            }
            Op::Gpa(a, rotations) => {
                let upstream = Mat::from_vec(node.rows, node.cols, g.clone());
                let down = gpa::gpa_backward(&upstream, rotations);
                touch(&mut grads, *a);
                let ga = grads[*a].as_mut().unwrap();
                for (o, d) in ga.iter_mut().zip(down.data()) {
                    *o += d;
                }
            }
            Op::MeanShapePenalty => {}
        }
        grads[id] = Some(g);
    }

    GradientMap { grads }
}

/// Central-difference check of the tape gradient of a scalar-valued
/// function at `point`. Returns the worst relative error
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over all coordinates.
pub fn gradcheck<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(point);
    let out = f(&mut tape, &leaf);
    assert!(out.is_scalar(), "gradcheck function must produce a scalar");
    let grads = backward(&tape, &out);
    let g_ad = grads.get(&leaf);

    let mut worst: f64 = 0.0;
    for i in 0..point.data.len() {
        let mut plus = point.detach();
        plus.data[i] += step;
        let mut minus = point.detach();
        minus.data[i] -= step;
        let f_plus = {
            let mut t = Tape::new();
            let l = t.leaf(&plus);
            f(&mut t, &l).value()
        };
        let f_minus = {
            let mut t = Tape::new();
            let l = t.leaf(&minus);
            f(&mut t, &l).value()
        };
        let g_fd = (f_plus - f_minus) / (2.0 * step);
        let err = (g_ad[i] - g_fd).abs() / (g_ad[i].abs() + g_fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Random tensor bounded away from zero (for kinked/singular ops).
    fn random_offset_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.2..1.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn forward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        assert_eq!(tape.sigmoid(&x).value(), 0.5);

        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = Tensor::from_mat(&Mat::identity(3));
        let mut tape = Tape::new();
        let al = tape.leaf(&a);
        let el = tape.leaf(&eye);
        let out = tape.matmul(&el, &al);
        assert_eq!(out.data, a.data);
    }

    #[test]
    fn gradcheck_every_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        type Case = (&'static str, Box<dyn Fn(&mut Tape, &Tensor) -> Tensor>, bool);
        let cases: Vec<Case> = vec![
            (
                "add",
                Box::new(|t, x| {
                    let c = t.leaf(&Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()));
                    let y = t.add(x, &c);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "sub",
                Box::new(|t, x| {
                    let c = t.leaf(&Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()));
                    let y = t.sub(&c, x);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            (
                "hadamard",
                Box::new(|t, x| {
                    let c = t.leaf(&Tensor::matrix(
                        3,
                        4,
                        (0..12).map(|i| 0.3 + 0.1 * i as f64).collect(),
                    ));
                    let y = t.hadamard(x, &c);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "scale",
                Box::new(|t, x| {
                    let y = t.scale(x, -1.7);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "matmul",
                Box::new(|t, x| {
                    let c = t.leaf(&Tensor::matrix(4, 2, (0..8).map(|i| 0.2 * i as f64 - 0.7).collect()));
                    let y = t.matmul(x, &c);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            (
                "transpose",
                Box::new(|t, x| {
                    let y = t.transpose(x);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            (
                "reshape",
                Box::new(|t, x| {
                    let y = t.reshape(x, 4, 3);
                    let c = t.leaf(&Tensor::matrix(4, 3, (0..12).map(|i| 0.05 * i as f64).collect()));
                    let y = t.hadamard(&y, &c);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "concat_rows",
                Box::new(|t, x| {
                    let c = t.leaf(&Tensor::matrix(2, 4, (0..8).map(|i| 0.1 * i as f64).collect()));
                    let y = t.concat_rows(&[x, &c, x]);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            (
                "slice_rows",
                Box::new(|t, x| {
                    let y = t.slice_rows(x, 1, 2);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            (
                "gather",
                Box::new(|t, x| {
                    let map = vec![0, 5, 5, 11, 3, 2];
                    let y = t.gather(x, &map, 2, 3);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            ("sum", Box::new(|t, x| t.sum(x)), false),
            ("mean", Box::new(|t, x| t.mean(x)), false),
            (
                "sin",
                Box::new(|t, x| {
                    let y = t.sin(x);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "cos",
                Box::new(|t, x| {
                    let y = t.cos(x);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "sigmoid",
                Box::new(|t, x| {
                    let y = t.sigmoid(x);
                    t.sum(&y)
                }),
                false,
            ),
            (
                "relu",
                Box::new(|t, x| {
                    let y = t.relu(x);
                    t.sum(&y)
                }),
                true,
            ),
            (
                "leaky_relu",
                Box::new(|t, x| {
                    let y = t.leaky_relu(x, 0.01);
                    t.sum(&y)
                }),
                true,
            ),
            (
                "add_row",
                Box::new(|t, x| {
                    let c = t.leaf(&Tensor::matrix(5, 12, vec![0.25; 60]));
                    let row = t.reshape(x, 1, 12);
                    let y = t.add_row(&c, &row);
                    t.frobenius_norm(&y)
                }),
                true,
            ),
            ("frobenius_norm", Box::new(|t, x| t.frobenius_norm(x)), true),
        ];
        for (name, f, offset) in &cases {
            for _ in 0..10 {
                let x = if *offset {
                    random_offset_tensor(&mut rng, 3, 4)
                } else {
                    random_tensor(&mut rng, 3, 4)
                };
                let err = gradcheck(f, &x, 1e-5);
                assert!(err < 1e-6, "{}: gradcheck error {}", name, err);
            }
        }
    }

    #[test]
    fn gradcheck_scalar_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            // First entry acts as the scalar, the rest as the tensor.
            let x = random_offset_tensor(&mut rng, 1, 7);
            let err = gradcheck(
                |t, x| {
                    let s = t.gather(x, &[0], 1, 1);
                    let rest = t.gather(x, &[1, 2, 3, 4, 5, 6], 2, 3);
                    let y = t.scalar_mul(&s, &rest);
                    t.frobenius_norm(&y)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-6, "scalar_mul: {}", err);
        }
    }

    #[test]
    fn gradcheck_positive_domain_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(0.3..2.0)).collect());
            let sqrt_err = gradcheck(
                |t, x| {
                    let y = t.sqrt(x);
                    t.sum(&y)
                },
                &x,
                1e-5,
            );
            assert!(sqrt_err < 1e-6, "sqrt: {}", sqrt_err);
            let powi_err = gradcheck(
                |t, x| {
                    let y = t.powi(x, 3);
                    t.sum(&y)
                },
                &x,
                1e-5,
            );
            assert!(powi_err < 1e-6, "powi: {}", powi_err);
            let sinc_err = gradcheck(
                |t, x| {
                    let y = t.sinc_sq(x);
                    t.sum(&y)
                },
                &x,
                1e-5,
            );
            assert!(sinc_err < 1e-6, "sinc_sq: {}", sinc_err);
            let vers_err = gradcheck(
                |t, x| {
                    let y = t.versine_sq(x);
                    t.sum(&y)
                },
                &x,
                1e-5,
            );
            assert!(vers_err < 1e-6, "versine_sq: {}", vers_err);
        }
    }

    #[test]
    fn sinc_and_versine_smooth_at_zero() {
        assert!((sinc_sq(0.0) - 1.0).abs() < 1e-15);
        assert!((versine_sq(0.0) - 0.5).abs() < 1e-15);
        // Series and exact branches agree around the switch point.
        for &x in &[1e-7, 9.9e-7, 1.01e-6, 1e-5] {
            assert!((sinc_sq(x) - x.sqrt().sin() / x.sqrt()).abs() < 1e-12);
            assert!((versine_sq(x) - (1.0 - x.sqrt().cos()) / x).abs() < 1e-9);
        }
    }

    #[test]
    fn gradcheck_cross_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, 1, 3);
            let err = gradcheck(
                |t, x| {
                    let k = t.cross_matrix(x);
                    let c = t.leaf(&Tensor::matrix(3, 3, (0..9).map(|i| 0.1 * i as f64 + 0.2).collect()));
                    let y = t.hadamard(&k, &c);
                    t.sum(&y)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-6, "cross_matrix: {}", err);
        }
    }

    #[test]
    fn nuclear_node_diagonal() {
        let mut tape = Tape::new();
        let d = tape.leaf(&Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0]));
        let nn = tape.nuclear_norm(&d);
        assert!((nn.value() - 7.0).abs() < 1e-12);
        let grads = backward(&tape, &nn);
        let g = grads.get(&d);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[3] - 1.0).abs() < 1e-12);
        assert!(g[1].abs() < 1e-12 && g[2].abs() < 1e-12);
    }

    #[test]
    fn nuclear_node_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random_tensor(&mut rng, 4, 6);
        let err = gradcheck(|t, x| t.nuclear_norm(x), &x, 1e-6);
        assert!(err < 1e-4, "nuclear gradcheck: {}", err);
    }

    #[test]
    fn nuclear_node_rank_one_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                data[i * 5 + j] = u[i] * v[j];
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(4, 5, data));
        let nn = tape.nuclear_norm(&x);
        let grads = backward(&tape, &nn);
        let g = grads.get(&x);
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..4 {
            for j in 0..5 {
                let want = (u[i] / un) * (v[j] / vn);
                assert!(
                    (g[i * 5 + j] - want).abs() < 1e-9,
                    "grad[{},{}] = {} want {}",
                    i,
                    j,
                    g[i * 5 + j],
                    want
                );
            }
        }
    }

    #[test]
    fn backward_sum_is_ones_and_squared_norm_is_2x() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = random_tensor(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let xl = tape.leaf(&x);
        let s = tape.sum(&xl);
        let grads = backward(&tape, &s);
        assert!(grads.get(&xl).iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let xl = tape.leaf(&x);
        let n = tape.frobenius_norm(&xl);
        let n2 = tape.powi(&n, 2);
        let grads = backward(&tape, &n2);
        let g = grads.get(&xl);
        for (gi, xi) in g.iter().zip(&x.data) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_composite_chain_matches_fd() {
        // Gated chain: y = |sigmoid(x W) * (x W)|_F with x used twice.
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let w = Tensor::matrix(4, 4, (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let x = random_tensor(&mut rng, 3, 4);
        let err = gradcheck(
            |t, x| {
                let wl = t.leaf(&w);
                let h = t.matmul(x, &wl);
                let gate = t.sigmoid(&h);
                let mixed = t.hadamard(&gate, &h);
                t.frobenius_norm(&mixed)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "composite chain: {}", err);
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let c = Tensor::matrix(1, 6, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x = random_tensor(&mut rng, 1, 6);
        let err = gradcheck(
            |t, x| {
                let cl = t.leaf(&c);
                let y = t.hadamard(x, &cl);
                t.sum(&y)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-10, "linear gradcheck: {}", err);
    }

    #[test]
    fn backward_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = random_offset_tensor(&mut rng, 3, 4);
        let run = |factor: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let xl = tape.leaf(&x);
            let s = tape.sin(&xl);
            let n = tape.frobenius_norm(&s);
            let scaled = tape.scale(&n, factor);
            backward(&tape, &scaled).get(&xl)
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b, "upstream doubling must be exact");
        }
    }

    #[test]
    fn replay_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = random_tensor(&mut rng, 4, 4);
        let run = || {
            let mut tape = Tape::new();
            let xl = tape.leaf(&x);
            let h = tape.sigmoid(&xl);
            let m = tape.matmul(&h, &xl);
            let n = tape.nuclear_norm(&m);
            let grads = backward(&tape, &n);
            (n.value(), grads.get(&xl))
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.5));
        let y = tape.add(&x, &x);
        let grads = backward(&tape, &y);
        assert_eq!(grads.get(&x)[0], 2.0);
    }

    #[test]
    fn gpa_node_passthrough_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // Identical centered frames: alignment is the identity, so the
        // upstream gradient passes through unchanged.
        let frame: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = Mat::from_vec(3, 4, frame).center_columns();
        let stacked = ShapeSequence::new(vec![base.clone(), base.clone(), base]).stacked();
        let mut tape = Tape::new();
        let x = tape.leaf_mat(&stacked);
        let aligned = tape.gpa_align(&x, 1e-8, 100).unwrap();
        let s = tape.sum(&aligned);
        let grads = backward(&tape, &s);
        let g = grads.get(&x);
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }
}

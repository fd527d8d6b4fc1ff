//! Dense matrix kernels: one-sided Jacobi SVD, orthogonal Procrustes,
//! Rodrigues rotation, nuclear norm and its subgradient.
//!
//! Everything is `f64`, row-major, and deterministic: the Jacobi sweep
//! order is fixed and SVD columns carry a fixed sign convention (the
//! largest-magnitude entry of each U column is positive), so repeated
//! runs produce bit-identical factors.

use std::fmt;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_EPS: f64 = 1e-10;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    /// Input contains NaN or infinite entries.
    NonFinite { context: &'static str },
    /// Rotation is not uniquely determined (cross-covariance rank < 2).
    Degenerate { context: String },
    /// Operand shapes are incompatible.
    DimensionMismatch { context: String },
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::NonFinite { context } => {
                write!(f, "non-finite input in {}", context)
            }
            LinalgError::Degenerate { context } => {
                write!(f, "degenerate configuration: {}", context)
            }
            LinalgError::DimensionMismatch { context } => {
                write!(f, "dimension mismatch: {}", context)
            }
        }
    }
}

impl std::error::Error for LinalgError {}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`, classic ikj loop so the inner axpy vectorizes.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Subtracts the column centroid (mean over columns) from every column.
    pub fn center_columns(&self) -> Mat {
        let mut out = self.clone();
        if self.cols == 0 {
            return out;
        }
        for i in 0..self.rows {
            let mean = self.row(i).iter().sum::<f64>() / self.cols as f64;
            for j in 0..self.cols {
                out.data[i * self.cols + j] -= mean;
            }
        }
        out
    }
}

fn det3(m: &Mat) -> f64 {
    debug_assert!(m.rows == 3 && m.cols == 3);
    let d = &m.data;
    d[0] * (d[4] * d[8] - d[5] * d[7]) - d[1] * (d[3] * d[8] - d[5] * d[6])
        + d[2] * (d[3] * d[7] - d[4] * d[6])
}

/// Element of SO(3): orthogonal within 1e-9, determinant +1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix(Mat);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Mat::identity(3))
    }

    /// Validates the SO(3) invariants before wrapping.
    pub fn new(m: Mat) -> Result<Self, LinalgError> {
        if m.rows != 3 || m.cols != 3 {
            return Err(LinalgError::DimensionMismatch {
                context: format!("rotation must be 3x3, got {}x{}", m.rows, m.cols),
            });
        }
        let rtr = m.transpose().matmul(&m);
        let eye = Mat::identity(3);
        for i in 0..3 {
            for j in 0..3 {
                if (rtr.get(i, j) - eye.get(i, j)).abs() > 1e-9 {
                    return Err(LinalgError::Degenerate {
                        context: format!(
                            "matrix is not orthogonal: |R'R - I|[{},{}] = {:.3e}",
                            i,
                            j,
                            (rtr.get(i, j) - eye.get(i, j)).abs()
                        ),
                    });
                }
            }
        }
        let det = det3(&m);
        if (det - 1.0).abs() > 1e-9 {
            return Err(LinalgError::Degenerate {
                context: format!("matrix determinant {} is not +1", det),
            });
        }
        Ok(RotationMatrix(m))
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0.matmul(&other.0))
    }

    pub fn apply(&self, shape: &Mat) -> Mat {
        self.0.matmul(shape)
    }

    /// Rotation angle in [0, pi] from the trace formula.
    pub fn angle(&self) -> f64 {
        let tr = self.0.get(0, 0) + self.0.get(1, 1) + self.0.get(2, 2);
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Thin SVD `A = U diag(sigma) V^T` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m x k, orthonormal columns.
    pub u: Mat,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// n x k, orthonormal columns.
    pub v: Mat,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Mat {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                let v = us.get(i, j) * self.sigma[j];
                us.set(i, j, v);
            }
        }
        us.matmul(&self.v.transpose())
    }

    /// Number of singular values above `RANK_EPS * sigma_max`.
    pub fn rank(&self) -> usize {
        let smax = self.sigma.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > RANK_EPS * smax).count()
    }
}

/// One-sided Jacobi SVD with cyclic sweeps.
///
/// Deterministic: fixed pair order, fixed sign convention (the
/// largest-magnitude entry of each U column is positive).
pub fn svd(a: &Mat) -> Result<SvdResult, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite { context: "svd" });
    }
    assert!(a.rows() >= 1 && a.cols() >= 1, "svd on empty matrix");
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (u, sigma, v) = one_sided_jacobi(work);
    let (mut u, mut v) = if transposed { (v, u) } else { (u, v) };
    // Sign convention on the final U orientation.
    for j in 0..sigma.len() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.rows() {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, j) < 0.0 {
            for i in 0..u.rows() {
                let val = -u.get(i, j);
                u.set(i, j, val);
            }
            for i in 0..v.rows() {
                let val = -v.get(i, j);
                v.set(i, j, val);
            }
        }
    }
    Ok(SvdResult { u, sigma, v })
}

/// Core Jacobi iteration on an m x n matrix with m >= n.
fn one_sided_jacobi(mut b: Mat) -> (Mat, Vec<f64>, Mat) {
    let m = b.rows();
    let n = b.cols();
    debug_assert!(m >= n);
    let mut v = Mat::identity(n);

    let col_dot = |b: &Mat, p: usize, q: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..m {
            acc += b.get(i, p) * b.get(i, q);
        }
        acc
    };

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = col_dot(&b, p, p);
                let beta = col_dot(&b, q, q);
                let gamma = col_dot(&b, p, q);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    b.set(i, p, c * bp - s * bq);
                    b.set(i, q, s * bp + c * bq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; sort descending (stable).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| col_dot(&b, j, j).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Mat::zeros(m, n);
    let mut v_sorted = Mat::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let max_norm = order.first().map(|&j| norms[j]).unwrap_or(0.0);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > max_norm * f64::EPSILON && s > 0.0 {
            for i in 0..m {
                u.set(i, dst, b.get(i, src) / s);
            }
        }
        for i in 0..n {
            v_sorted.set(i, dst, v.get(i, src));
        }
    }

    // Zero columns of U get a deterministic orthonormal completion.
    for j in 0..n {
        let norm: f64 = (0..m).map(|i| u.get(i, j) * u.get(i, j)).sum::<f64>().sqrt();
        if norm > 0.5 {
            continue;
        }
        sigma[j] = 0.0;
        'candidate: for cand in 0..m {
            let mut col = vec![0.0; m];
            col[cand] = 1.0;
            for prev in 0..n {
                if prev == j {
                    continue;
                }
                let dot: f64 = (0..m).map(|i| col[i] * u.get(i, prev)).sum();
                for (i, c) in col.iter_mut().enumerate() {
                    *c -= dot * u.get(i, prev);
                }
            }
            let cnorm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if cnorm > 0.5 {
                for (i, c) in col.iter().enumerate() {
                    u.set(i, j, c / cnorm);
                }
                break 'candidate;
            }
        }
    }

    (u, sigma, v_sorted)
}

/// Best rotation in the least-squares sense: `argmin_R ||R*source - target||_F`
/// over SO(3), via SVD of the cross-covariance with the Kabsch sign fix.
///
/// No translation or scale is solved; center shapes upstream.
pub fn procrustes_rotation(source: &Mat, target: &Mat) -> Result<RotationMatrix, LinalgError> {
    if source.rows() != 3 || target.rows() != 3 || source.cols() != target.cols() {
        return Err(LinalgError::DimensionMismatch {
            context: format!(
                "procrustes wants 3xP pairs, got {}x{} and {}x{}",
                source.rows(),
                source.cols(),
                target.rows(),
                target.cols()
            ),
        });
    }
    if source.cols() < 3 {
        return Err(LinalgError::DimensionMismatch {
            context: format!("procrustes needs P >= 3, got P = {}", source.cols()),
        });
    }
    let m = target.matmul(&source.transpose());
    let f = svd(&m)?;
    if f.rank() < 2 {
        return Err(LinalgError::Degenerate {
            context: format!(
                "cross-covariance rank {} < 2, rotation not unique",
                f.rank()
            ),
        });
    }
    let sign = if det3(&f.u.matmul(&f.v.transpose())) < 0.0 { -1.0 } else { 1.0 };
    // R = U diag(1, 1, sign) V^T
    let mut u = f.u.clone();
    for i in 0..3 {
        let val = u.get(i, 2) * sign;
        u.set(i, 2, val);
    }
    let r = u.matmul(&f.v.transpose());
    RotationMatrix::new(r)
}

/// Cross-product matrix K such that `K x = v × x`.
pub fn cross_matrix(v: &[f64; 3]) -> Mat {
    Mat::from_vec(3, 3, vec![0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0])
}

/// Axis-angle vector to rotation matrix.
///
/// `R = I + sin|v| K + (1 - cos|v|) K^2` with K the normalized
/// cross-product matrix; below 1e-8 the second-order Taylor form
/// `I + K_raw + K_raw^2/2` avoids the division by the angle.
pub fn rodrigues(axis_angle: &[f64; 3]) -> Result<RotationMatrix, LinalgError> {
    if !axis_angle.iter().all(|v| v.is_finite()) {
        return Err(LinalgError::NonFinite { context: "rodrigues" });
    }
    let theta =
        (axis_angle[0] * axis_angle[0] + axis_angle[1] * axis_angle[1] + axis_angle[2] * axis_angle[2])
            .sqrt();
    let k_raw = cross_matrix(axis_angle);
    let eye = Mat::identity(3);
    let r = if theta < 1e-8 {
        eye.add(&k_raw).add(&k_raw.matmul(&k_raw).scale(0.5))
    } else {
        let k = k_raw.scale(1.0 / theta);
        eye.add(&k.scale(theta.sin()))
            .add(&k.matmul(&k).scale(1.0 - theta.cos()))
    };
    RotationMatrix::new(r)
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Mat) -> Result<f64, LinalgError> {
    Ok(svd(a)?.sigma.iter().sum())
}

/// Subgradient `U V^T` of the nuclear norm, restricted to singular values
/// above `RANK_EPS * sigma_max` (the zero choice at zero singular values
/// is a valid element of the subdifferential).
pub fn nuclear_norm_subgrad(a: &Mat) -> Result<Mat, LinalgError> {
    let f = svd(a)?;
    let smax = f.sigma.first().copied().unwrap_or(0.0);
    let cutoff = RANK_EPS * smax;
    let mut out = Mat::zeros(a.rows(), a.cols());
    for (k, &s) in f.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        for i in 0..a.rows() {
            let uik = f.u.get(i, k);
            for j in 0..a.cols() {
                let val = out.get(i, j) + uik * f.v.get(j, k);
                out.set(i, j, val);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Mat::from_vec(rows, cols, data)
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> RotationMatrix {
        let v = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        rodrigues(&v).unwrap()
    }

    fn assert_rotation_invariants(r: &RotationMatrix) {
        let rtr = r.mat().transpose().matmul(r.mat());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((rtr.get(i, j) - want).abs() < 1e-9);
            }
        }
        assert!((det3(r.mat()) - 1.0).abs() < 1e-9);
    }

    /// Eigenvalues of a symmetric 3x3 matrix by solving the characteristic
    /// cubic with the trigonometric formula. Independent of the SVD path.
    fn sym3_eigenvalues(m: &Mat) -> [f64; 3] {
        let a = m.get(0, 0);
        let b = m.get(1, 1);
        let c = m.get(2, 2);
        let d = m.get(0, 1);
        let e = m.get(1, 2);
        let f = m.get(0, 2);
        let p1 = d * d + e * e + f * f;
        if p1 == 0.0 {
            let mut eig = [a, b, c];
            eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
            return eig;
        }
        let q = (a + b + c) / 3.0;
        let p2 = (a - q).powi(2) + (b - q).powi(2) + (c - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        // det((M - qI)/p)
        let bm = Mat::from_vec(
            3,
            3,
            vec![a - q, d, f, d, b - q, e, f, e, c - q],
        )
        .scale(1.0 / p);
        let r = (det3(&bm) / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        let mut eig = [e1, e2, e3];
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig
    }

    #[test]
    fn svd_identity() {
        let f = svd(&Mat::identity(3)).unwrap();
        for s in &f.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_diagonal_sorted() {
        let a = Mat::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]);
        let f = svd(&a).unwrap();
        assert!((f.sigma[0] - 4.0).abs() < 1e-12);
        assert!((f.sigma[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn svd_matches_characteristic_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_mat(&mut rng, 5, 3);
            let ata = a.transpose().matmul(&a);
            let eig = sym3_eigenvalues(&ata);
            let f = svd(&a).unwrap();
            for (s, ev) in f.sigma.iter().zip(eig.iter()) {
                assert!(
                    (s - ev.max(0.0).sqrt()).abs() < 1e-9,
                    "sigma {} vs sqrt(eig) {}",
                    s,
                    ev.max(0.0).sqrt()
                );
            }
        }
    }

    #[test]
    fn svd_reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n) in &[(1, 1), (3, 3), (5, 2), (2, 5), (17, 9), (9, 17), (64, 64), (32, 96)] {
            let a = random_mat(&mut rng, m, n);
            let f = svd(&a).unwrap();
            let err = f.reconstruct().sub(&a).frobenius_norm();
            assert!(
                err <= 1e-8 * a.frobenius_norm().max(1.0),
                "reconstruction error {} at {}x{}",
                err,
                m,
                n
            );
            let utu = f.u.transpose().matmul(&f.u);
            let vtv = f.v.transpose().matmul(&f.v);
            let k = f.sigma.len();
            for i in 0..k {
                for j in 0..k {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((utu.get(i, j) - want).abs() < 1e-8);
                    assert!((vtv.get(i, j) - want).abs() < 1e-8);
                }
            }
            for w in f.sigma.windows(2) {
                assert!(w[0] >= w[1]);
            }
            assert!(f.sigma.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        // Rank-1 4x3: three singular values, two exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_mat(&mut rng, 4, 1);
        let v = random_mat(&mut rng, 1, 3);
        let a = u.matmul(&v);
        let f = svd(&a).unwrap();
        assert!(f.rank() == 1);
        let utu = f.u.transpose().matmul(&f.u);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((utu.get(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn svd_zero_matrix() {
        let f = svd(&Mat::zeros(3, 2)).unwrap();
        assert_eq!(f.sigma, vec![0.0, 0.0]);
        let utu = f.u.transpose().matmul(&f.u);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((utu.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_mat(&mut rng, 8, 6);
        let f1 = svd(&a).unwrap();
        let f2 = svd(&a).unwrap();
        assert_eq!(f1.u.data(), f2.u.data());
        assert_eq!(f1.sigma, f2.sigma);
        assert_eq!(f1.v.data(), f2.v.data());
    }

    #[test]
    fn svd_rejects_non_finite() {
        let a = Mat::from_vec(1, 2, vec![f64::NAN, 1.0]);
        assert!(matches!(svd(&a), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn procrustes_identity_on_equal_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_mat(&mut rng, 3, 6);
        let r = procrustes_rotation(&s, &s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r.mat().get(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn procrustes_recovers_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_mat(&mut rng, 3, 8);
        let q = rodrigues(&[0.0, 0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        let target = q.apply(&s);
        let r = procrustes_rotation(&s, &target).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.mat().get(i, j) - q.mat().get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn procrustes_exact_for_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let s = random_mat(&mut rng, 3, 7);
            let q = random_rotation(&mut rng);
            let r = procrustes_rotation(&s, &q.apply(&s)).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r.mat().get(i, j) - q.mat().get(i, j)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn procrustes_planar_reflection_stays_rotation() {
        // Planar source; target is its mirror image. A proper rotation cannot
        // reproduce the reflection, but the result must stay in SO(3) and
        // reach the constrained optimum found by random search.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut source = random_mat(&mut rng, 3, 6);
        for j in 0..6 {
            source.set(2, j, 0.0);
        }
        let mut target = source.clone();
        for j in 0..6 {
            let v = -target.get(0, j);
            target.set(0, j, v);
        }
        let r = procrustes_rotation(&source, &target).unwrap();
        assert_rotation_invariants(&r);
        let ours = r.apply(&source).sub(&target).frobenius_norm();
        let mut best = f64::INFINITY;
        for _ in 0..1_000_000 {
            let q = random_rotation(&mut rng);
            let obj = q.apply(&source).sub(&target).frobenius_norm();
            if obj < best {
                best = obj;
            }
        }
        assert!(ours <= best + 1e-3, "ours {} vs sampled best {}", ours, best);
    }

    #[test]
    fn procrustes_degenerate_rank() {
        // Collinear points: cross-covariance rank 1.
        let source = Mat::from_vec(3, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let err = procrustes_rotation(&source, &source);
        assert!(matches!(err, Err(LinalgError::Degenerate { .. })));
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        let r = rodrigues(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.mat().data(), Mat::identity(3).data());
    }

    #[test]
    fn rodrigues_quarter_turn_maps_x_to_y() {
        let r = rodrigues(&[0.0, 0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        let x = Mat::from_vec(3, 1, vec![1.0, 0.0, 0.0]);
        let y = r.apply(&x);
        assert!((y.get(0, 0)).abs() < 1e-12);
        assert!((y.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((y.get(2, 0)).abs() < 1e-12);
    }

    #[test]
    fn rodrigues_angle_matches_trace_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v: [f64; 3] = [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let r = rodrigues(&v).unwrap();
            assert_rotation_invariants(&r);
            // trace(R) = 1 + 2 cos|v|
            let tr = r.mat().get(0, 0) + r.mat().get(1, 1) + r.mat().get(2, 2);
            assert!((tr - (1.0 + 2.0 * norm.cos())).abs() < 1e-9);
        }
    }

    #[test]
    fn rodrigues_stable_near_zero() {
        for &mag in &[1e-15, 1e-12, 1e-10, 1e-8, 1e-6] {
            let r = rodrigues(&[mag, -mag, mag * 0.5]).unwrap();
            assert_rotation_invariants(&r);
        }
    }

    #[test]
    fn nuclear_norm_identity_and_diagonal() {
        assert!((nuclear_norm(&Mat::identity(4)).unwrap() - 4.0).abs() < 1e-12);
        let d = Mat::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]);
        assert!((nuclear_norm(&d).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn nuclear_norm_rank_one_stack() {
        // F rows all equal to s: nuclear norm = sqrt(F) * |s|_2.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = 6usize;
        let mut data = Vec::new();
        for _ in 0..f {
            data.extend_from_slice(&s);
        }
        let a = Mat::from_vec(f, 9, data);
        let s_norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = (f as f64).sqrt() * s_norm;
        assert!((nuclear_norm(&a).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn nuclear_norm_at_least_frobenius() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let a = random_mat(&mut rng, 6, 4);
            let nn = nuclear_norm(&a).unwrap();
            assert!(nn >= a.frobenius_norm() - 1e-12);
        }
        // Equality iff numerical rank 1.
        let u = random_mat(&mut rng, 6, 1);
        let v = random_mat(&mut rng, 1, 4);
        let r1 = u.matmul(&v);
        assert!((nuclear_norm(&r1).unwrap() - r1.frobenius_norm()).abs() < 1e-9);
    }

    #[test]
    fn nuclear_norm_orthogonal_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let a = random_mat(&mut rng, 3, 8);
            let q = random_rotation(&mut rng);
            let nn_a = nuclear_norm(&a).unwrap();
            let nn_qa = nuclear_norm(&q.apply(&a)).unwrap();
            assert!((nn_a - nn_qa).abs() < 1e-9);
        }
    }

    #[test]
    fn nuclear_subgrad_trivial_cases() {
        let g = nuclear_norm_subgrad(&Mat::identity(2)).unwrap();
        assert!((g.get(0, 0) - 1.0).abs() < 1e-12 && (g.get(1, 1) - 1.0).abs() < 1e-12);
        let d = Mat::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]);
        let g = nuclear_norm_subgrad(&d).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nuclear_subgrad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_mat(&mut rng, 4, 6);
        let g = nuclear_norm_subgrad(&a).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..6 {
                let mut plus = a.clone();
                plus.set(i, j, a.get(i, j) + h);
                let mut minus = a.clone();
                minus.set(i, j, a.get(i, j) - h);
                let fd =
                    (nuclear_norm(&plus).unwrap() - nuclear_norm(&minus).unwrap()) / (2.0 * h);
                let denom = g.get(i, j).abs().max(fd.abs()).max(1e-8);
                assert!(
                    (g.get(i, j) - fd).abs() / denom < 1e-4,
                    "subgrad {} vs fd {}",
                    g.get(i, j),
                    fd
                );
            }
        }
    }
}

//! Small dense matrices generic over the [`Real`] scalar trait.
//!
//! State dimensions in this crate are tiny (a handful of latent components and
//! indicators per lag), so everything is plain row-major storage with direct
//! loops. Factorizations branch on primal values only, which keeps them usable
//! on the AD tape.

use crate::error::{Error, Result};
use crate::tape::Real;

/// Dense row-major matrix.
#[derive(Clone, Debug)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Mat<S> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    /// Zero matrix; `proto` supplies the recording context for constants.
    pub fn zeros(proto: S, rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![proto.lit(0.0); rows * cols] }
    }

    pub fn identity(proto: S, n: usize) -> Self {
        let mut m = Mat::zeros(proto, n, n);
        for i in 0..n {
            m[(i, i)] = proto.lit(1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn map<T: Real>(&self, f: impl Fn(S) -> T) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&s| f(s)).collect() }
    }

    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, rhs.rows);
        let proto = self.proto();
        Mat::from_fn(self.rows, rhs.cols, |i, j| {
            let mut acc = proto.lit(0.0);
            for k in 0..self.cols {
                acc = acc + self[(i, k)] * rhs[(k, j)];
            }
            acc
        })
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len());
        let proto = self.proto();
        (0..self.rows)
            .map(|i| {
                let mut acc = proto.lit(0.0);
                for k in 0..self.cols {
                    acc = acc + self[(i, k)] * v[k];
                }
                acc
            })
            .collect()
    }

    pub fn add(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + rhs[(i, j)])
    }

    pub fn sub(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)] - rhs[(i, j)])
    }

    /// `A B Aᵀ` without forming the transpose.
    pub fn sandwich(&self, b: &Mat<S>) -> Mat<S> {
        let ab = self.matmul(b);
        let proto = self.proto();
        Mat::from_fn(self.rows, self.rows, |i, j| {
            let mut acc = proto.lit(0.0);
            for k in 0..self.cols {
                acc = acc + ab[(i, k)] * self[(j, k)];
            }
            acc
        })
    }

    /// `P ← (P + Pᵀ)/2`, suppressing asymmetry drift.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        let half = self.proto().lit(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let s = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = s;
                self[(j, i)] = s;
            }
        }
    }

    /// Copy `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat<S>) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat<S> {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Mat::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn max_abs_val(&self) -> f64 {
        self.data.iter().map(|s| s.val().abs()).fold(0.0, f64::max)
    }

    fn proto(&self) -> S {
        self.data[0]
    }

    /// Lower-triangular Cholesky factor, or `None` if a pivot is not strictly
    /// positive (decided on primal values).
    pub fn cholesky(&self) -> Option<Mat<S>> {
        assert!(self.is_square());
        let n = self.rows;
        let proto = self.proto();
        let mut l = Mat::zeros(proto, n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = self[(i, j)];
                for k in 0..j {
                    acc = acc - l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if !(acc.val() > 0.0) || !acc.val().is_finite() {
                        return None;
                    }
                    l[(i, i)] = acc.sqrt();
                } else {
                    l[(i, j)] = acc / l[(j, j)];
                }
            }
        }
        Some(l)
    }
}

impl<S> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// `log det` of a matrix given its Cholesky factor.
pub fn chol_logdet<S: Real>(l: &Mat<S>) -> S {
    let mut acc = l.proto().lit(0.0);
    for i in 0..l.rows() {
        acc = acc + l[(i, i)].ln();
    }
    acc + acc
}

/// Solve `L Lᵀ x = b` given the lower Cholesky factor.
pub fn chol_solve_vec<S: Real>(l: &Mat<S>, b: &[S]) -> Vec<S> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = l[(i, k)] * y[k];
            y[i] = y[i] - t;
        }
        y[i] = y[i] / l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[(k, i)] * y[k];
            y[i] = y[i] - t;
        }
        y[i] = y[i] / l[(i, i)];
    }
    y
}

/// LU factorization with partial pivoting (pivot choice on primal values).
pub struct Lu<S> {
    lu: Mat<S>,
    piv: Vec<usize>,
}

pub fn lu_factor<S: Real>(m: &Mat<S>) -> Option<Lu<S>> {
    assert!(m.is_square());
    let n = m.rows();
    let mut lu = m.clone();
    let mut piv: Vec<usize> = (0..n).collect();
    let scale = lu.max_abs_val().max(1.0);
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[(col, col)].val().abs();
        for r in (col + 1)..n {
            let v = lu[(r, col)].val().abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if !(best > 1e-13 * scale) || !best.is_finite() {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                let a = lu[(col, j)];
                lu[(col, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = a;
            }
            piv.swap(col, pivot);
        }
        let d = lu[(col, col)];
        for r in (col + 1)..n {
            let f = lu[(r, col)] / d;
            lu[(r, col)] = f;
            for j in (col + 1)..n {
                let t = f * lu[(col, j)];
                lu[(r, j)] = lu[(r, j)] - t;
            }
        }
    }
    Some(Lu { lu, piv })
}

impl<S: Real> Lu<S> {
    pub fn solve_vec(&self, b: &[S]) -> Vec<S> {
        let n = self.lu.rows();
        let mut x: Vec<S> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            for k in 0..i {
                let t = self.lu[(i, k)] * x[k];
                x[i] = x[i] - t;
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let t = self.lu[(i, k)] * x[k];
                x[i] = x[i] - t;
            }
            x[i] = x[i] / self.lu[(i, i)];
        }
        x
    }

    pub fn solve_mat(&self, b: &Mat<S>) -> Mat<S> {
        let n = self.lu.rows();
        assert_eq!(b.rows(), n);
        let mut out = Mat::zeros(b[(0, 0)], n, b.cols());
        for j in 0..b.cols() {
            let col: Vec<S> = (0..n).map(|i| b[(i, j)]).collect();
            let x = self.solve_vec(&col);
            for i in 0..n {
                out[(i, j)] = x[i];
            }
        }
        out
    }

    pub fn inverse(&self) -> Mat<S> {
        let n = self.lu.rows();
        let id = Mat::identity(self.lu[(0, 0)], n);
        self.solve_mat(&id)
    }
}

/// Inverse of `I - B` where `B` is strictly lower triangular, by forward
/// substitution. Exact and always defined.
pub fn unit_lower_inverse<S: Real>(b: &Mat<S>) -> Mat<S> {
    assert!(b.is_square());
    let n = b.rows();
    let proto = b[(0, 0)];
    // Columns of X solve (I - B) x = e_j.
    let mut x = Mat::identity(proto, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let mut acc = proto.lit(0.0);
            for k in j..i {
                acc = acc + b[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = acc;
        }
    }
    x
}

/// Solve the discrete Lyapunov equation `P = T P Tᵀ + W`.
///
/// Small systems go through the dense linear system on vectorized `P`; larger
/// ones use doubling iteration. Returns `None` when the iteration fails to
/// converge (spectral radius at or above one).
pub fn lyapunov<S: Real>(t: &Mat<S>, w: &Mat<S>, tol: f64, max_iter: usize) -> Option<Mat<S>> {
    assert!(t.is_square() && w.is_square() && t.rows() == w.rows());
    let n = t.rows();
    if n <= 5 {
        return lyapunov_direct(t, w);
    }
    let mut p = w.clone();
    let mut a = t.clone();
    for _ in 0..max_iter {
        let apat = a.sandwich(&p);
        let next = p.add(&apat);
        let delta = apat.max_abs_val();
        let scale = next.max_abs_val().max(1.0);
        p = next;
        p.symmetrize();
        if delta < tol * scale {
            return Some(p);
        }
        a = a.matmul(&a);
        if !a.max_abs_val().is_finite() {
            return None;
        }
    }
    None
}

/// Direct solve of `(I - T ⊗ T) vec(P) = vec(W)` (row-major stacking).
fn lyapunov_direct<S: Real>(t: &Mat<S>, w: &Mat<S>) -> Option<Mat<S>> {
    let n = t.rows();
    let proto = t[(0, 0)];
    let m = n * n;
    let mut sys = Mat::zeros(proto, m, m);
    for i in 0..n {
        for j in 0..n {
            let a = i * n + j;
            for k in 0..n {
                for l in 0..n {
                    let b = k * n + l;
                    let coef = t[(i, k)] * t[(j, l)];
                    sys[(a, b)] = if a == b { proto.lit(1.0) - coef } else { -coef };
                }
            }
        }
    }
    let rhs: Vec<S> = (0..m).map(|a| w[(a / n, a % n)]).collect();
    let lu = lu_factor(&sys)?;
    let p = lu.solve_vec(&rhs);
    let mut out = Mat::from_fn(n, n, |i, j| p[i * n + j]);
    if !out.max_abs_val().is_finite() {
        return None;
    }
    out.symmetrize();
    Some(out)
}

/// Spectral radius of a real matrix: closed form up to 2x2, normalized
/// repeated squaring (`rho(T) = lim ||T^(2^k)||^(1/2^k)`) above.
pub fn spectral_radius(m: &Mat<f64>) -> f64 {
    assert!(m.is_square());
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return m[(0, 0)].abs();
    }
    if n == 2 {
        let tr = m[(0, 0)] + m[(1, 1)];
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let disc = 0.25 * tr * tr - det;
        return if disc >= 0.0 {
            let root = disc.sqrt();
            (0.5 * tr + root).abs().max((0.5 * tr - root).abs())
        } else {
            // Complex pair: |lambda|^2 = det.
            det.abs().sqrt()
        };
    }
    let norm = |a: &[f64]| -> f64 { a.iter().map(|v| v * v).sum::<f64>().sqrt() };
    let mut b: Vec<f64> = m.data().to_vec();
    let mut scratch = vec![0.0f64; n * n];
    let mut log_scale = 0.0f64;
    let mut pow = 1.0f64;
    for _ in 0..40 {
        let nb = norm(&b);
        if nb == 0.0 {
            return 0.0;
        }
        if !nb.is_finite() {
            return f64::INFINITY;
        }
        log_scale += nb.ln() / pow;
        let inv = 1.0 / nb;
        for v in b.iter_mut() {
            *v *= inv;
        }
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += b[i * n + k] * b[k * n + j];
                }
                scratch[i * n + j] = acc;
            }
        }
        std::mem::swap(&mut b, &mut scratch);
        pow *= 2.0;
    }
    (log_scale + norm(&b).ln() / pow).exp()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the orthogonal matrix of column eigenvectors.
pub fn sym_eigen(m: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    assert!(m.is_square());
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Mat::identity(1.0f64, n);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + a.max_abs_val()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    (eig, v)
}

/// Pseudo-inverse of a symmetric PSD matrix, zeroing eigenvalues below
/// `tol * max_eigenvalue`.
pub fn sym_pseudo_inverse(m: &Mat<f64>, tol: f64) -> Mat<f64> {
    let (eig, v) = sym_eigen(m);
    let emax = eig.iter().cloned().fold(0.0f64, f64::max);
    let n = m.rows();
    Mat::from_fn(n, n, |i, j| {
        let mut acc = 0.0;
        for k in 0..n {
            if eig[k] > tol * emax.max(1e-300) {
                acc += v[(i, k)] * v[(j, k)] / eig[k];
            }
        }
        acc
    })
}

/// Check that a symmetric matrix is PSD up to `-tol * trace` eigenvalue slack.
pub fn is_psd(m: &Mat<f64>, tol: f64) -> bool {
    let (eig, _) = sym_eigen(m);
    let trace: f64 = (0..m.rows()).map(|i| m[(i, i)]).sum();
    let slack = tol * trace.abs().max(1.0);
    eig.iter().all(|&e| e >= -slack)
}

/// Dimension-checked conversion of a nested `Vec` into a matrix.
pub fn mat_from_nested(rows: &[Vec<f64>]) -> Result<Mat<f64>> {
    if rows.is_empty() {
        return Ok(Mat::from_rows(0, 0, Vec::new()));
    }
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::Validation("ragged matrix rows".into()));
        }
        data.extend_from_slice(r);
    }
    Ok(Mat::from_rows(rows.len(), cols, data))
}

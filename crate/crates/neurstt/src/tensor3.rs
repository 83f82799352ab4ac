//! Dense 3-D tensor container and Tucker algebra primitives.
//!
//! A [`Tensor3`] stores an `n1 x n2 x n3` stack of frames (height, width,
//! time). Element `(i, j, k)` lives at linear offset `k*n1*n2 + i*n2 + j`,
//! so a frontal slice (one frame) is a contiguous row-major `n1 x n2`
//! block — slice extraction for per-frame nuclear norms is a memcpy.
//!
//! Unfolding follows the cyclic column ordering:
//!
//! * mode 1: `n1 x (n2*n3)`, element `(i,j,k)` at column `j + k*n2`
//! * mode 2: `n2 x (n3*n1)`, element `(i,j,k)` at column `k + i*n3`
//! * mode 3: `n3 x (n1*n2)`, element `(i,j,k)` at column `i + j*n1`
//!
//! The SVD is a one-sided Jacobi with a fixed sweep order and a fixed
//! sign convention, so results are deterministic for a given input.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 3-D tensor, frame-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    dims: (usize, usize, usize),
    data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        assert!(
            dims.0 >= 1 && dims.1 >= 1 && dims.2 >= 1,
            "tensor dims must all be >= 1, got {dims:?}"
        );
        Tensor3 {
            dims,
            data: vec![T::zero(); dims.0 * dims.1 * dims.2],
        }
    }

    /// Builds a tensor from values in the linear layout.
    pub fn from_vec(dims: (usize, usize, usize), data: Vec<T>) -> Result<Self> {
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::usage(format!("tensor dims must all be >= 1, got {dims:?}")));
        }
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::shape(format!(
                "expected {} values for dims {:?}, got {}",
                dims.0 * dims.1 * dims.2,
                dims,
                data.len()
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut t = Tensor3::zeros(dims);
        for k in 0..dims.2 {
            for i in 0..dims.0 {
                for j in 0..dims.1 {
                    *t.at_mut(i, j, k) = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        k * self.dims.0 * self.dims.1 + i * self.dims.1 + j
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut T {
        let o = self.offset(i, j, k);
        &mut self.data[o]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Frontal slice `k` as an `n1 x n2` matrix.
    pub fn frame(&self, k: usize) -> Matrix<T> {
        let (n1, n2, _) = self.dims;
        let start = k * n1 * n2;
        Matrix {
            rows: n1,
            cols: n2,
            data: self.data[start..start + n1 * n2].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != rhs.dims {
            return Err(Error::shape(format!(
                "tensor dims {:?} vs {:?}",
                self.dims, rhs.dims
            )));
        }
        Ok(Tensor3 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn abs_sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v.abs())
    }

    pub fn sq_frobenius(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn frobenius(&self) -> T {
        self.sq_frobenius().sqrt()
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &v| a + v) / T::from_f64_lossy(self.len() as f64)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            *m.at_mut(i, i) = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                *m.at_mut(r, c) = f(r, c);
            }
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(values: &[T]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = &self.data[r * self.cols..(r + 1) * self.cols];
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!(
                "matrix shapes {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn abs_sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v.abs())
    }

    pub fn sq_frobenius(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn frobenius(&self) -> T {
        self.sq_frobenius().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-frame binary masks sharing the [`Tensor3`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    dims: (usize, usize, usize),
    data: Vec<bool>,
}

impl MaskTensor {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        MaskTensor {
            dims,
            data: vec![false; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = MaskTensor::zeros(dims);
        for k in 0..dims.2 {
            for i in 0..dims.0 {
                for j in 0..dims.1 {
                    let o = k * dims.0 * dims.1 + i * dims.1 + j;
                    m.data[o] = f(i, j, k);
                }
            }
        }
        m
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[k * self.dims.0 * self.dims.1 + i * self.dims.1 + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let o = k * self.dims.0 * self.dims.1 + i * self.dims.1 + j;
        self.data[o] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Number of set pixels in frame `k`.
    pub fn frame_count(&self, k: usize) -> usize {
        let (n1, n2, _) = self.dims;
        self.data[k * n1 * n2..(k + 1) * n1 * n2]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

fn check_mode(mode: usize) -> Result<()> {
    if !(1..=3).contains(&mode) {
        return Err(Error::usage(format!("mode must be 1, 2 or 3, got {mode}")));
    }
    Ok(())
}

/// Shape of the mode-`mode` unfolding of a tensor with `dims`.
pub fn unfolding_shape(dims: (usize, usize, usize), mode: usize) -> Result<(usize, usize)> {
    check_mode(mode)?;
    let (n1, n2, n3) = dims;
    Ok(match mode {
        1 => (n1, n2 * n3),
        2 => (n2, n3 * n1),
        _ => (n3, n1 * n2),
    })
}

/// Mode-`mode` unfolding with cyclic column ordering.
pub fn unfold<T: Scalar>(x: &Tensor3<T>, mode: usize) -> Result<Matrix<T>> {
    let (rows, cols) = unfolding_shape(x.dims(), mode)?;
    let (n1, n2, n3) = x.dims();
    let mut m = Matrix::zeros(rows, cols);
    for k in 0..n3 {
        for i in 0..n1 {
            for j in 0..n2 {
                let v = x.at(i, j, k);
                match mode {
                    1 => *m.at_mut(i, j + k * n2) = v,
                    2 => *m.at_mut(j, k + i * n3) = v,
                    _ => *m.at_mut(k, i + j * n1) = v,
                }
            }
        }
    }
    Ok(m)
}

/// Inverse of [`unfold`] for the same mode and dims.
pub fn fold<T: Scalar>(m: &Matrix<T>, mode: usize, dims: (usize, usize, usize)) -> Result<Tensor3<T>> {
    let expected = unfolding_shape(dims, mode)?;
    if m.shape() != expected {
        return Err(Error::shape(format!(
            "mode-{mode} unfolding of {dims:?} must be {expected:?}, got {:?}",
            m.shape()
        )));
    }
    let (n1, n2, n3) = dims;
    let mut x = Tensor3::zeros(dims);
    for k in 0..n3 {
        for i in 0..n1 {
            for j in 0..n2 {
                let v = match mode {
                    1 => m.at(i, j + k * n2),
                    2 => m.at(j, k + i * n3),
                    _ => m.at(k, i + j * n1),
                };
                *x.at_mut(i, j, k) = v;
            }
        }
    }
    Ok(x)
}

/// Tensor-matrix product along `mode`; the mode-th dim becomes `m.rows()`.
pub fn mode_product<T: Scalar>(x: &Tensor3<T>, m: &Matrix<T>, mode: usize) -> Result<Tensor3<T>> {
    check_mode(mode)?;
    let (n1, n2, n3) = x.dims();
    let mode_dim = [n1, n2, n3][mode - 1];
    if m.cols() != mode_dim {
        return Err(Error::shape(format!(
            "mode-{mode} product needs {mode_dim} columns, matrix is {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let unfolded = unfold(x, mode)?;
    let product = m.matmul(&unfolded)?;
    let new_dims = match mode {
        1 => (m.rows(), n2, n3),
        2 => (n1, m.rows(), n3),
        _ => (n1, n2, m.rows()),
    };
    fold(&product, mode, new_dims)
}

/// `core ×₁ f1 ×₂ f2 ×₃ f3`; output dims `(f1.rows, f2.rows, f3.rows)`.
pub fn tucker_reconstruct<T: Scalar>(
    core: &Tensor3<T>,
    f1: &Matrix<T>,
    f2: &Matrix<T>,
    f3: &Matrix<T>,
) -> Result<Tensor3<T>> {
    let step1 = mode_product(core, f1, 1)?;
    let step2 = mode_product(&step1, f2, 2)?;
    mode_product(&step2, f3, 3)
}

/// Thin SVD `M = U diag(s) Vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

/// Relative cutoff below which singular values count as zero for rank
/// decisions and subgradients.
pub const RANK_TOLERANCE: f64 = 1e-12;

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Householder QR with column pivoting, stopping when the remaining
/// column mass is at machine-noise level relative to the largest pivot.
/// Returns the Householder reflectors, the effective-rank rows of R and
/// the pivot sequence.
struct PivotedQr<T> {
    reflectors: Vec<(Vec<T>, T)>,
    r_rows: Vec<Vec<T>>,
    pivots: Vec<usize>,
    rank: usize,
}

fn pivoted_qr<T: Scalar>(m: &Matrix<T>) -> PivotedQr<T> {
    let (rows, cols) = m.shape();
    let mut w: Vec<Vec<T>> = (0..cols)
        .map(|c| (0..rows).map(|r| m.at(r, c)).collect())
        .collect();
    let mut pivots: Vec<usize> = (0..cols).collect();
    let mut reflectors: Vec<(Vec<T>, T)> = Vec::new();
    let steps = rows.min(cols);
    let mut cutoff = T::zero();
    let mut rank = 0;

    for k in 0..steps {
        // Fresh tail norms keep the pivot choice robust to cancellation.
        let mut best = k;
        let mut best_norm = T::zero();
        for (j, col) in w.iter().enumerate().skip(k) {
            let ns = dot(&col[k..], &col[k..]);
            if ns > best_norm {
                best_norm = ns;
                best = j;
            }
        }
        let col_norm = best_norm.sqrt();
        if k == 0 {
            cutoff = col_norm * T::epsilon() * T::from_f64_lossy(rows.max(cols) as f64 * 8.0);
        }
        if col_norm <= cutoff || col_norm == T::zero() {
            break;
        }
        w.swap(k, best);
        pivots.swap(k, best);

        let x0 = w[k][k];
        let alpha = if x0 >= T::zero() { -col_norm } else { col_norm };
        let mut v = vec![T::zero(); rows];
        v[k] = x0 - alpha;
        v[(k + 1)..rows].copy_from_slice(&w[k][(k + 1)..rows]);
        let vtv = dot(&v[k..], &v[k..]);
        let beta = if vtv > T::zero() {
            (T::one() + T::one()) / vtv
        } else {
            T::zero()
        };
        for col in w.iter_mut().skip(k) {
            let s = dot(&v[k..], &col[k..]);
            if s != T::zero() {
                let bs = beta * s;
                for (cr, vr) in col[k..].iter_mut().zip(&v[k..]) {
                    *cr = *cr - bs * *vr;
                }
            }
        }
        w[k][k] = alpha;
        for r in (k + 1)..rows {
            w[k][r] = T::zero();
        }
        reflectors.push((v, beta));
        rank = k + 1;
    }

    let r_rows: Vec<Vec<T>> = (0..rank)
        .map(|k| (0..cols).map(|j| if j >= k { w[j][k] } else { T::zero() }).collect())
        .collect();
    PivotedQr {
        reflectors,
        r_rows,
        pivots,
        rank,
    }
}

/// One-sided Jacobi on a set of columns. Returns the rotated columns,
/// their norms sorted descending, and the accumulated right rotations.
fn jacobi_columns<T: Scalar>(mut w: Vec<Vec<T>>) -> (Vec<Vec<T>>, Vec<T>, Vec<Vec<T>>) {
    let n = w.len();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|c| {
            let mut col = vec![T::zero(); n];
            col[c] = T::one();
            col
        })
        .collect();
    let mut norms_sq: Vec<T> = w.iter().map(|c| dot(c, c)).collect();
    let eps = T::epsilon() * T::from_f64_lossy(8.0);

    for _ in 0..64 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let app = norms_sq[p];
                let aqq = norms_sq[q];
                if app == T::zero() || aqq == T::zero() {
                    continue;
                }
                let apq = dot(&w[p], &w[q]);
                if apq.abs() <= eps * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (apq + apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (wp_col, wq_col) = pair_mut(&mut w, p, q);
                for (wp, wq) in wp_col.iter_mut().zip(wq_col.iter_mut()) {
                    let a = *wp;
                    let b = *wq;
                    *wp = c * a - s * b;
                    *wq = s * a + c * b;
                }
                let (vp_col, vq_col) = pair_mut(&mut v, p, q);
                for (vp, vq) in vp_col.iter_mut().zip(vq_col.iter_mut()) {
                    let a = *vp;
                    let b = *vq;
                    *vp = c * a - s * b;
                    *vq = s * a + c * b;
                }
                let two = T::one() + T::one();
                norms_sq[p] = c * c * app - two * c * s * apq + s * s * aqq;
                norms_sq[q] = s * s * app + two * c * s * apq + c * c * aqq;
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<T> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());
    let w_sorted: Vec<Vec<T>> = order.iter().map(|&i| w[i].clone()).collect();
    let v_sorted: Vec<Vec<T>> = order.iter().map(|&i| v[i].clone()).collect();
    let sigma_sorted: Vec<T> = order.iter().map(|&i| sigma[i]).collect();
    (w_sorted, sigma_sorted, v_sorted)
}

/// Extends an orthonormal set to `target` columns by one pass of
/// Gram-Schmidt over the canonical basis.
fn complete_basis<T: Scalar>(cols: &mut Vec<Vec<T>>, len: usize, target: usize) {
    let mut cand = 0;
    while cols.len() < target {
        debug_assert!(cand < len, "completion candidates exhausted");
        let mut e = vec![T::zero(); len];
        e[cand] = T::one();
        cand += 1;
        for col in cols.iter() {
            let proj = dot(&e, col);
            if proj != T::zero() {
                for (er, cr) in e.iter_mut().zip(col.iter()) {
                    *er = *er - proj * *cr;
                }
            }
        }
        let norm = dot(&e, &e).sqrt();
        if norm > T::from_f64_lossy(0.5) {
            let inv = T::one() / norm;
            cols.push(e.into_iter().map(|x| x * inv).collect());
        }
    }
}

/// Rank-revealing thin SVD: only the directions above working-precision
/// noise are returned (`u` is `m×re`, `v` is `n×re`, `s` has length
/// `re`, descending). This is the hot-path form the nuclear-norm loss
/// uses; [`svd`] pads it to the full thin contract.
#[derive(Debug, Clone)]
pub struct CompactSvd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> CompactSvd<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

/// Compact SVD via rank-revealing pivoted QR followed by one-sided
/// Jacobi on the effective-rank block. Deterministic: fixed pivot and
/// sweep order and the sign convention that the first nonzero entry of
/// each U column is nonnegative.
pub fn svd_compact<T: Scalar>(m: &Matrix<T>) -> Result<CompactSvd<T>> {
    if !m.all_finite() {
        return Err(Error::non_finite("svd input has non-finite entries"));
    }
    let transposed = m.rows() < m.cols();
    let work = if transposed { m.transpose() } else { m.clone() };
    let (rows, cols) = work.shape();

    let qr = pivoted_qr(&work);
    let re = qr.rank;

    // Jacobi on R1ᵀ: columns are the rows of the rank block of R.
    let (w_cols, sigma, z_cols) = if re > 0 {
        jacobi_columns(qr.r_rows.clone())
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    let s_max = sigma.first().copied().unwrap_or_else(T::zero);
    let null_tol = s_max * T::from_f64_lossy(1e-9);

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(re);
    let mut v_cols: Vec<Vec<T>> = Vec::with_capacity(re);
    let mut kept_sigma = Vec::with_capacity(re);
    for c in 0..re {
        if sigma[c] <= null_tol || sigma[c] <= T::zero() {
            break; // descending order: the rest are noise directions
        }
        kept_sigma.push(sigma[c]);
        // U column: Q · [z; 0] through the stored reflectors.
        let mut u = vec![T::zero(); rows];
        for (i, zrow) in z_cols[c].iter().enumerate() {
            u[i] = *zrow;
        }
        for k in (0..re).rev() {
            let (v, beta) = &qr.reflectors[k];
            let s = dot(&v[k..], &u[k..]);
            if s != T::zero() {
                let bs = *beta * s;
                for (ur, vr) in u[k..].iter_mut().zip(&v[k..]) {
                    *ur = *ur - bs * *vr;
                }
            }
        }
        u_cols.push(u);
        // V column: normalized rotated row, un-permuted.
        let inv = T::one() / sigma[c];
        let mut vcol = vec![T::zero(); cols];
        for (i, &piv) in qr.pivots.iter().enumerate() {
            vcol[piv] = w_cols[c][i] * inv;
        }
        v_cols.push(vcol);
    }

    // Sign convention on the kept pairs.
    let sign_tol = T::epsilon() * T::from_f64_lossy(16.0);
    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let first = uc.iter().find(|e| e.abs() > sign_tol);
        if let Some(&e) = first {
            if e < T::zero() {
                for x in uc.iter_mut() {
                    *x = -*x;
                }
                for x in vc.iter_mut() {
                    *x = -*x;
                }
            }
        }
    }

    let kept = kept_sigma.len();
    let u = Matrix::from_fn(rows, kept, |r, c| u_cols[c][r]);
    let v = Matrix::from_fn(cols, kept, |r, c| v_cols[c][r]);
    if transposed {
        Ok(CompactSvd {
            u: v,
            s: kept_sigma,
            v: u,
        })
    } else {
        Ok(CompactSvd {
            u,
            s: kept_sigma,
            v,
        })
    }
}

/// Thin SVD with `r = min(rows, cols)` columns. Directions at
/// machine-noise level are reported as exact zeros with orthonormal
/// filler columns, so U and V always have orthonormal columns.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    let compact = svd_compact(m)?;
    let (rows, cols) = m.shape();
    let r = rows.min(cols);

    let mut sigma = compact.s.clone();
    sigma.resize(r, T::zero());

    let mut u_cols: Vec<Vec<T>> = (0..compact.rank())
        .map(|c| (0..rows).map(|row| compact.u.at(row, c)).collect())
        .collect();
    let mut v_cols: Vec<Vec<T>> = (0..compact.rank())
        .map(|c| (0..cols).map(|row| compact.v.at(row, c)).collect())
        .collect();
    complete_basis(&mut u_cols, rows, r);
    complete_basis(&mut v_cols, cols, r);

    // Filler columns get the same sign convention; with zero singular
    // values the sides flip independently.
    let sign_tol = T::epsilon() * T::from_f64_lossy(16.0);
    for cols_set in [&mut u_cols, &mut v_cols] {
        for col in cols_set.iter_mut().skip(compact.rank()) {
            if let Some(&e) = col.iter().find(|e| e.abs() > sign_tol) {
                if e < T::zero() {
                    for x in col.iter_mut() {
                        *x = -*x;
                    }
                }
            }
        }
    }

    Ok(SvdResult {
        u: Matrix::from_fn(rows, r, |row, c| u_cols[c][row]),
        s: sigma,
        v: Matrix::from_fn(cols, r, |row, c| v_cols[c][row]),
    })
}

fn pair_mut<X>(v: &mut [Vec<X>], p: usize, q: usize) -> (&mut Vec<X>, &mut Vec<X>) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// Sum of singular values.
pub fn nuclear_norm<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    let result = svd_compact(m)?;
    Ok(result.s.iter().fold(T::zero(), |acc, &s| acc + s))
}

impl<T: Scalar> SvdResult<T> {
    /// `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let r = self.s.len();
        let mut scaled = self.u.clone();
        for c in 0..r {
            for row in 0..scaled.rows() {
                *scaled.at_mut(row, c) = scaled.at(row, c) * self.s[c];
            }
        }
        scaled.matmul(&self.v.transpose()).expect("shapes agree by construction")
    }

    /// Number of singular values above `RANK_TOLERANCE * s_max`.
    pub fn numerical_rank(&self) -> usize {
        let s_max = self.s.first().copied().unwrap_or_else(T::zero);
        let tol = s_max * T::from_f64_lossy(RANK_TOLERANCE);
        self.s.iter().filter(|&&s| s > tol).count()
    }
}

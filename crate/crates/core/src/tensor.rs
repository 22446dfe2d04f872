//! Dense row-major tensors and the handful of kernels the encoder needs.
//!
//! Everything is generic over [`Real`] so the same forward/backward code can
//! run in `f32` (the production path) and in `f64` (gradient verification).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub trait Real: Float + FromPrimitive + NumAssign + Sum + Copy + Send + Sync + Debug + Default + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in target float type")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {expected} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.numel() || dims.contains(&0) {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.last_dim());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self { dims: vec![n, m], data: out }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64().expect("finite")).expect("representable")).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    /// Frobenius norm computed in `f64`.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("{what} must be a matrix, got dims {:?}", t.dims)));
    }
    Ok((t.dims[0], t.dims[1]))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (k2, n) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("inner dims differ: {m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { dims: vec![m, n], data: out })
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(&a.transpose(), b)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (n, k2) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("inner dims differ: {m}x{k} · ({n}x{k2})ᵀ")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Ok(Tensor { dims: vec![m, n], data: out })
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Sums the rows of a matrix into a vector of length `cols`.
pub fn sum_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let d = a.last_dim();
    let mut out = vec![T::zero(); d];
    for i in 0..a.rows() {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Tensor { dims: vec![d], data: out }
}

/// Adds `bias[n]` to every row of `a[m×n]`.
pub fn add_row_bias<T: Real>(a: &mut Tensor<T>, bias: &Tensor<T>) {
    debug_assert_eq!(a.last_dim(), bias.numel());
    for i in 0..a.rows() {
        for (o, &b) in a.row_mut(i).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    debug_assert!(out.is_finite());
    out
}

/// Per-row statistics kept by [`layer_norm_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Real>(a: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Tensor<T> {
    layer_norm_cached(a, gain, bias, eps).0
}

pub fn layer_norm_cached<T: Real>(a: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> (Tensor<T>, NormCache<T>) {
    let d = a.last_dim();
    debug_assert_eq!(gain.numel(), d);
    debug_assert_eq!(bias.numel(), d);
    let inv_d = T::one() / real::<T>(d as f64);
    let mut xhat = a.clone();
    let mut out = a.clone();
    let mut rstd = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (h, &x) in xh.iter_mut().zip(row) {
            *h = (x - mean) * r;
        }
        let o = out.row_mut(i);
        for (j, o) in o.iter_mut().enumerate() {
            *o = xhat.data[i * d + j] * gain.data[j] + bias.data[j];
        }
    }
    debug_assert!(out.is_finite());
    (out, NormCache { xhat, rstd })
}

/// Returns `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward<T: Real>(grad_out: &Tensor<T>, gain: &Tensor<T>, cache: &NormCache<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = grad_out.last_dim();
    let inv_d = T::one() / real::<T>(d as f64);
    let mut dx = Tensor::zeros(grad_out.dims());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..grad_out.rows() {
        let g = grad_out.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dgain.data[j] += g[j] * xh[j];
            dbias.data[j] += g[j];
            dxhat[j] = g[j] * gain.data[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dxhat_xhat = dot(&dxhat, xh) * inv_d;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Exact (erf-based) Gaussian error linear unit, elementwise.
pub fn gelu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for x in &mut out.data {
        *x = gelu_scalar(*x);
    }
    out
}

#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let v = x.to_f64().expect("finite");
    real(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

/// d gelu / dx = Φ(x) + x·φ(x).
#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let v = x.to_f64().expect("finite");
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    real(cdf + v * pdf)
}

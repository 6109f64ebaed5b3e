//! Dense row-major tensors over `f32` / `f64`.
//!
//! Matrix products go through the packed `matrixmultiply` kernels. For a given
//! shape and machine the kernel walks the inner dimension in fixed-size panels
//! in a fixed order, so results are bit-reproducible run to run. There is no
//! threading inside a product.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable in a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c <- alpha * a * b + beta * c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover every strided index
                // touched for an m x k by k x n product; `Tensor` methods check this.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Swaps two axes, materializing the result.
    pub fn swap_axes(&self, a: usize, b: usize) -> Result<Self> {
        let nd = self.ndim();
        if a >= nd || b >= nd {
            return Err(Error::Shape(format!("swap_axes({a},{b}) on {:?}", self.shape)));
        }
        if a == b {
            return Ok(self.clone());
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        Ok(self.permute(&perm))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let nd = self.ndim();
        assert_eq!(perm.len(), nd);
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor { shape: out_shape, data: out }
    }

    /// Plain matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = rhs.as_matrix()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", self.shape, rhs.shape)));
        }
        let mut out = Tensor::zeros([m, n]);
        gemm_into(false, false, m, k, n, &self.data, &rhs.data, T::one(), T::zero(), &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · rhs` for `[k, m]` and `[k, n]`.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        let (k, m) = self.as_matrix()?;
        let (k2, n) = rhs.as_matrix()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_tn {:?} x {:?}", self.shape, rhs.shape)));
        }
        let mut out = Tensor::zeros([m, n]);
        gemm_into(true, false, m, k, n, &self.data, &rhs.data, T::one(), T::zero(), &mut out.data);
        Ok(out)
    }

    /// `self · rhsᵀ` for `[m, k]` and `[n, k]`.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix()?;
        let (n, k2) = rhs.as_matrix()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {:?} x {:?}", self.shape, rhs.shape)));
        }
        let mut out = Tensor::zeros([m, n]);
        gemm_into(false, true, m, k, n, &self.data, &rhs.data, T::one(), T::zero(), &mut out.data);
        Ok(out)
    }

    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// Collapses all leading axes: `[a, b, ..., c] -> (a*b*..., c)`.
    pub fn rows_cols(&self) -> (usize, usize) {
        let c = self.last_dim();
        (self.data.len() / c.max(1), c)
    }

    /// Sums over every axis but the last.
    pub fn sum_rows(&self) -> Self {
        let (r, c) = self.rows_cols();
        let mut out = vec![T::zero(); c];
        for row in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[row * c..(row + 1) * c]) {
                *o = *o + v;
            }
        }
        Tensor { shape: vec![c], data: out }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c <- alpha * op(a) * op(b) + beta * c`, all buffers row-major and dense.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    alpha: T,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Grouped affine map `out[n,p,g,:] = x[n,p,g,:] · w[g] + b[g]`.
///
/// `x: [N, P, G, D]`, `w: [G, D, E]`, `b: [G, E]`. Output group `g` reads only
/// input group `g`.
pub fn grouped_matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, groups, d) = grouped_dims(x)?;
    let (e, wg) = match w.shape() {
        [g, dd, e] if *g == groups && *dd == d => (*e, *g),
        s => return Err(Error::Shape(format!("grouped weight {:?} for input {:?}", s, x.shape()))),
    };
    if let Some(b) = b {
        if b.shape() != [wg, e] {
            return Err(Error::Shape(format!("grouped bias {:?}, expected [{wg}, {e}]", b.shape())));
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = e;
    let mut out = Tensor::<T>::zeros(out_shape);
    if let Some(b) = b {
        for r in 0..rows {
            out.data[r * groups * e..(r + 1) * groups * e].copy_from_slice(b.data());
        }
    }
    let rs = (groups * d) as isize;
    let rso = (groups * e) as isize;
    for g in 0..groups {
        T::gemm(
            rows,
            d,
            e,
            T::one(),
            &x.data()[g * d..],
            rs,
            1,
            &w.data()[g * d * e..],
            e as isize,
            1,
            T::one(),
            &mut out.data[g * e..],
            rso,
            1,
        );
    }
    Ok(out)
}

/// Interprets `[..., G, D]` as `(rows, G, D)`.
pub(crate) fn grouped_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("grouped input needs [..., G, D], got {:?}", s)));
    }
    let d = s[s.len() - 1];
    let g = s[s.len() - 2];
    let rows = if g * d == 0 { 0 } else { x.len() / (g * d) };
    Ok((rows, g, d))
}

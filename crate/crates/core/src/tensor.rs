//! Dense order-p tensors and the multilinear primitives built on them.
//!
//! Storage is row-major over `(i_1, ..., i_p)`: the last index varies
//! fastest. Mode indices in this API are 0-based.

use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MpcaError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(MpcaError::DimensionMismatch(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let len = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        let mut idx = vec![0usize; dims.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            increment(&mut idx, dims);
        }
        Ok(t)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dims.len() {
            return Err(MpcaError::DimensionMismatch(format!(
                "index of order {} for tensor of order {}",
                idx.len(),
                self.dims.len()
            )));
        }
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            if i >= d {
                return Err(MpcaError::InvalidInput(format!(
                    "index {idx:?} out of bounds for dims {:?}",
                    self.dims
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, idx: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(idx)?])
    }

    /// Mode-`q` product with a matrix `a` of shape `m x d_q`:
    /// `[T x_q A]_{..j..} = sum_{i_q} T_{..i_q..} A_{j i_q}`.
    pub fn mode_product(&self, q: usize, a: &ArrayView2<T>) -> Result<Tensor<T>> {
        let dq = self.mode_dim(q)?;
        if a.ncols() != dq {
            return Err(MpcaError::DimensionMismatch(format!(
                "matrix with {} columns applied to mode {q} of size {dq}",
                a.ncols()
            )));
        }
        let (left, right) = self.split_at_mode(q);
        let m = a.nrows();
        let src = ArrayView3::from_shape((left, dq, right), &self.data).expect("shape checked");
        let mut out = Vec::with_capacity(left * m * right);
        for slab in src.axis_iter(Axis(0)) {
            let prod = a.dot(&slab);
            out.extend(prod.iter().copied());
        }
        let mut dims = self.dims.clone();
        dims[q] = m;
        Tensor::new(dims, out)
    }

    /// Contraction of mode `q` against a vector; the result has order `p - 1`
    /// (a vector contraction of an order-1 tensor yields a `[1]`-shaped tensor).
    pub fn mode_product_vec(&self, q: usize, v: &[T]) -> Result<Tensor<T>> {
        let dq = self.mode_dim(q)?;
        if v.len() != dq {
            return Err(MpcaError::DimensionMismatch(format!(
                "vector of length {} applied to mode {q} of size {dq}",
                v.len()
            )));
        }
        let (left, right) = self.split_at_mode(q);
        let mut out = vec![T::zero(); left * right];
        for l in 0..left {
            let base = l * dq * right;
            let dst = &mut out[l * right..(l + 1) * right];
            for (i, &vi) in v.iter().enumerate() {
                let row = &self.data[base + i * right..base + (i + 1) * right];
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += vi * x;
                }
            }
        }
        let mut dims = self.dims.clone();
        dims.remove(q);
        if dims.is_empty() {
            dims.push(1);
        }
        Tensor::new(dims, out)
    }

    pub fn inner(&self, other: &Tensor<T>) -> Result<T> {
        if self.dims != other.dims {
            return Err(MpcaError::DimensionMismatch(format!(
                "inner product of {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    /// Sine of the angle between the vectorizations of two tensors.
    pub fn sin_angle(&self, other: &Tensor<T>) -> Result<T> {
        if self.dims != other.dims {
            return Err(MpcaError::DimensionMismatch(format!(
                "sin angle between {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        sin_angle(&self.data, &other.data)
    }

    fn mode_dim(&self, q: usize) -> Result<usize> {
        self.dims.get(q).copied().ok_or_else(|| {
            MpcaError::InvalidInput(format!("mode {q} out of range for order {}", self.order()))
        })
    }

    /// Sizes of the flattened index blocks before and after mode `q`.
    fn split_at_mode(&self, q: usize) -> (usize, usize) {
        let left = self.dims[..q].iter().product();
        let right = self.dims[q + 1..].iter().product();
        (left, right)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(MpcaError::InvalidInput("tensor order must be at least 1".into()));
    }
    if dims.contains(&0) {
        return Err(MpcaError::InvalidInput(format!("zero-sized mode in {dims:?}")));
    }
    Ok(())
}

/// Advances a row-major multi-index; wraps to all zeros after the last entry.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) {
    for q in (0..dims.len()).rev() {
        idx[q] += 1;
        if idx[q] < dims[q] {
            return;
        }
        idx[q] = 0;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `sqrt(1 - <a,b>^2 / (|a|^2 |b|^2))`, clamped to `[0, 1]`.
pub fn sin_angle<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(MpcaError::DimensionMismatch(format!(
            "sin angle between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a);
    let nb = dot(b, b);
    if na <= T::zero() || nb <= T::zero() {
        return Err(MpcaError::InvalidInput("sin angle of a zero vector".into()));
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let c = dot(a, b) / (na * nb);
    // residual form keeps accuracy for nearly parallel vectors
    let r2 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let e = x / na - c * y / nb;
            e * e
        })
        .sum::<T>();
    Ok(r2.sqrt().min(T::one()))
}

/// A vector of Euclidean norm one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector<T> {
    coords: Vec<T>,
}

impl<T: Scalar> UnitVector<T> {
    /// Normalizes `v`; rejects empty or zero vectors.
    pub fn new(v: Vec<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(MpcaError::InvalidInput("empty vector".into()));
        }
        let n = norm(&v);
        if !(n > T::zero()) || !n.is_finite() {
            return Err(MpcaError::InvalidInput("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(UnitVector {
            coords: v.into_iter().map(|x| x / n).collect(),
        })
    }

    /// Wraps a vector that must already have unit norm.
    pub fn from_unit(v: Vec<T>) -> Result<Self> {
        let n = norm(&v);
        if v.is_empty() || (n - T::one()).abs() > T::unit_tol() {
            return Err(MpcaError::InvalidInput(format!("vector norm {n} is not 1")));
        }
        Ok(UnitVector { coords: v })
    }

    /// The `i`-th canonical basis vector of length `dim`.
    pub fn basis(dim: usize, i: usize) -> Result<Self> {
        if i >= dim {
            return Err(MpcaError::InvalidInput(format!("basis index {i} >= {dim}")));
        }
        let mut v = vec![T::zero(); dim];
        v[i] = T::one();
        Ok(UnitVector { coords: v })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<T> {
        self.coords
    }

    pub fn dot(&self, other: &[T]) -> T {
        dot(&self.coords, other)
    }

    pub fn negated(&self) -> Self {
        UnitVector {
            coords: self.coords.iter().map(|&x| -x).collect(),
        }
    }

    /// Flips the sign if needed so that `<self, reference> >= 0`.
    pub fn aligned_with(self, reference: &[T]) -> Self {
        if self.dot(reference) < T::zero() {
            self.negated()
        } else {
            self
        }
    }

    pub fn sin_angle(&self, other: &UnitVector<T>) -> Result<T> {
        if self.dim() != other.dim() {
            return Err(MpcaError::DimensionMismatch(format!(
                "sin angle between dims {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        sin_angle(&self.coords, &other.coords)
    }
}

impl<T> std::ops::Index<usize> for UnitVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.coords[i]
    }
}

/// Outer product `v_1 ⊗ ... ⊗ v_p`.
pub fn outer_product<T: Scalar>(vectors: &[UnitVector<T>]) -> Result<Tensor<T>> {
    let slices: Vec<&[T]> = vectors.iter().map(|v| v.as_slice()).collect();
    outer_product_slices(&slices)
}

pub(crate) fn outer_product_slices<T: Scalar>(vectors: &[&[T]]) -> Result<Tensor<T>> {
    if vectors.is_empty() {
        return Err(MpcaError::InvalidInput("outer product of no vectors".into()));
    }
    let dims: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
    check_dims(&dims)?;
    Ok(Tensor {
        data: kron(vectors),
        dims,
    })
}

/// Row-major Kronecker product of vectors, i.e. `vec(v_1 ⊗ ... ⊗ v_k)`.
/// The empty product is `[1]`.
pub(crate) fn kron<T: Scalar>(vectors: &[&[T]]) -> Vec<T> {
    let mut acc = vec![T::one()];
    for v in vectors {
        let mut next = Vec::with_capacity(acc.len() * v.len());
        for &a in &acc {
            next.extend(v.iter().map(|&x| a * x));
        }
        acc = next;
    }
    acc
}

/// A unit rank-one tensor stored through its mode factors, plus an
/// associated variance value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOnePC<T> {
    factors: Vec<UnitVector<T>>,
    value: T,
}

impl<T: Scalar> RankOnePC<T> {
    pub fn new(factors: Vec<UnitVector<T>>, value: T) -> Result<Self> {
        if factors.is_empty() {
            return Err(MpcaError::InvalidInput("rank-one PC needs at least one factor".into()));
        }
        if value < T::zero() || !value.is_finite() {
            return Err(MpcaError::InvalidInput(format!("PC value {value} must be finite and >= 0")));
        }
        Ok(RankOnePC { factors, value })
    }

    pub fn factors(&self) -> &[UnitVector<T>] {
        &self.factors
    }

    pub fn factor(&self, q: usize) -> &UnitVector<T> {
        &self.factors[q]
    }

    pub fn factor_slices(&self) -> Vec<&[T]> {
        self.factors.iter().map(|f| f.as_slice()).collect()
    }

    pub fn value(&self) -> T {
        self.value
    }

    pub fn with_value(mut self, value: T) -> Self {
        self.value = value;
        self
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.dim()).collect()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        outer_product(&self.factors).expect("factors are nonempty")
    }

    /// `<self, other>` as rank-one tensors: the product of mode inner products.
    pub fn tensor_inner(&self, other: &RankOnePC<T>) -> Result<T> {
        if self.dims() != other.dims() {
            return Err(MpcaError::DimensionMismatch(format!(
                "rank-one tensors of dims {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(self
            .factors
            .iter()
            .zip(&other.factors)
            .map(|(a, b)| a.dot(b.as_slice()))
            .fold(T::one(), |acc, x| acc * x))
    }

    /// Sine of the angle between the vectorized rank-one tensors.
    pub fn sin_angle(&self, other: &RankOnePC<T>) -> Result<T> {
        if self.dims() != other.dims() {
            return Err(MpcaError::DimensionMismatch(format!(
                "sin angle between {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        // 1 - prod(1 - s_q^2), accumulated without cancellation
        let mut x = T::zero();
        for (a, b) in self.factors.iter().zip(&other.factors) {
            let s = a.sin_angle(b)?;
            let s2 = s * s;
            x = x + s2 - x * s2;
        }
        Ok(x.max(T::zero()).sqrt().min(T::one()))
    }

    /// Largest per-mode sine angle.
    pub fn max_mode_sin_angle(&self, other: &RankOnePC<T>) -> Result<T> {
        let mut worst = T::zero();
        for (a, b) in self.factors.iter().zip(&other.factors) {
            worst = worst.max(a.sin_angle(b)?);
        }
        Ok(worst)
    }

    /// Complete orthogonality: orthogonal in every mode.
    pub fn completely_orthogonal(&self, other: &RankOnePC<T>, tol: T) -> bool {
        self.factors
            .iter()
            .zip(&other.factors)
            .all(|(a, b)| a.dot(b.as_slice()).abs() <= tol)
    }

    /// Flips the listed modes' factors.
    pub fn with_flipped(&self, modes: &[usize]) -> Self {
        let mut out = self.clone();
        for &q in modes {
            out.factors[q] = out.factors[q].negated();
        }
        out
    }
}

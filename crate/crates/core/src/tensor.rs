//! Dense row-major tensors.
//!
//! [`Tensor<f32>`] is the storage type for parameters, caches and checkpoints.
//! The gradient tape works on [`Tensor<f64>`]; [`Tensor::cast`] converts
//! between the two. All forward math lives here so the tape and the plain
//! tensor API share one implementation.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Norms at or below this value are treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Element type of a [`Tensor`].
pub trait Scalar: Float + Default + fmt::Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("no rows"));
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as a matrix: rank-1 tensors are a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).expect("float conversion"))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!(
                "{what}: non-finite value at flat index {i}"
            ))),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "dot: {} vs {} elements",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if self.rank() != 2 || other.rank() != 2 || k != k2 {
            return Err(Error::shape(format!(
                "matmul: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Temperature softmax along the last axis.
    pub fn softmax(&self, tau: T) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::param(format!(
                "softmax temperature must be positive, got {tau:?}"
            )));
        }
        let cols = *self.shape.last().ok_or_else(|| Error::shape("empty shape"))?;
        let inv = T::one() / tau;
        let mut data = self.data.iter().map(|&x| x * inv).collect::<Vec<_>>();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Normalizes every row (last axis) to unit Euclidean length.
    pub fn l2_normalize(&self) -> Result<Self> {
        let cols = *self.shape.last().ok_or_else(|| Error::shape("empty shape"))?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(cols) {
            let n = dot(row, row).sqrt();
            check_norm(n)?;
            for x in row.iter_mut() {
                *x = *x / n;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Cosine similarity of two equally sized tensors, clamped to `[-1, 1]`.
    pub fn cosine_sim(&self, other: &Self) -> Result<T> {
        let d = self.dot(other)?;
        let (na, nb) = (self.norm(), other.norm());
        check_norm(na)?;
        check_norm(nb)?;
        Ok((d / (na * nb)).max(-T::one()).min(T::one()))
    }

    /// Mean along `axis` of a matrix; the reduced axis is kept with size 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        match axis {
            0 => {
                let mut out = vec![T::zero(); n];
                for r in self.data.chunks(n) {
                    for (o, &x) in out.iter_mut().zip(r) {
                        *o = *o + x;
                    }
                }
                let c = T::from(m).unwrap();
                Ok(Tensor {
                    shape: vec![1, n],
                    data: out.into_iter().map(|x| x / c).collect(),
                })
            }
            1 => {
                let c = T::from(n).unwrap();
                Ok(Tensor {
                    shape: vec![m, 1],
                    data: self
                        .data
                        .chunks(n)
                        .map(|r| r.iter().fold(T::zero(), |a, &x| a + x) / c)
                        .collect(),
                })
            }
            _ => Err(Error::shape(format!("mean_axis: bad axis {axis}"))),
        }
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let n = first.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::shape(format!("concat_rows: {pn} vs {n} columns")));
            }
            m += pm;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![m, n], data)
    }

    /// Concatenates matrices horizontally.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let m = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::shape(format!("concat_cols: {pm} vs {m} rows")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if idx.is_empty() {
            return Err(Error::shape("select_rows: no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::shape(format!("select_rows: row {i} of {m}")));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![idx.len(), n], data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {n}")));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in self.data.chunks(n) {
            data.extend_from_slice(&r[start..start + len]);
        }
        Tensor::new(vec![m, len], data)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn check_norm<T: Scalar>(n: T) -> Result<()> {
    let n = n.to_f64().unwrap_or(f64::NAN);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateVector {
            norm: n,
            threshold: EPS_NORM,
        });
    }
    Ok(())
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating in i-k-j order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let col = t(&[2, 1], &[3., 4.]);
        assert_eq!(id.matmul(&col).unwrap().data(), &[3., 4.]);
        let row = t(&[1, 2], &[1., 2.]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.]);
        assert!(matches!(col.matmul(&col), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_values() {
        let s = t(&[2], &[0., 0.]).softmax(1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[3], &[7., 7., 7.]).softmax(0.3).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        // reference: exp(i) / (e + e^2 + e^3)
        let s = t(&[3], &[1., 2., 3.]).softmax(1.0).unwrap();
        for (x, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((x - want).abs() < 1e-7);
        }
        assert!(matches!(t(&[1], &[1.]).softmax(0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn l2_normalize_values() {
        let v = t(&[2], &[3., 4.]).l2_normalize().unwrap();
        assert_eq!(v.data(), &[0.6, 0.8]);
        let u = t(&[3], &[0., 1., 0.]);
        assert_eq!(u.l2_normalize().unwrap(), u);
        assert!(matches!(
            t(&[2], &[0., 1e-14]).l2_normalize(),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn cosine_values() {
        let v = t(&[3], &[0.3, -2., 5.]);
        assert!((v.cosine_sim(&v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(t(&[2], &[1., 0.]).cosine_sim(&t(&[2], &[0., 1.])).unwrap(), 0.0);
        let c = t(&[2], &[1., 1.]).cosine_sim(&t(&[2], &[1., 0.])).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn concat_and_slice() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.slice_cols(2, 1).unwrap(), b);
        let r = Tensor::concat_rows(&[&a, &t(&[2], &[9., 9.])]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.mean_axis(0).unwrap().data(), &[13. / 3., 5.]);
    }

    fn small_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in small_vec(), tau in 0.01f64..10.0) {
            let n = v.len();
            let s = Tensor::new(vec![n], v).unwrap().softmax(tau).unwrap();
            prop_assert!(s.data().iter().all(|&x| x >= 0.0));
            prop_assert!((s.sum() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-3.0f64..3.0, 8)) {
            let x = Tensor::new(vec![8], v).unwrap();
            prop_assume!(x.norm() > 1e-3);
            let once = x.l2_normalize().unwrap();
            let twice = once.l2_normalize().unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
            prop_assert!((once.norm() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut mk = |m: usize, n: usize| {
                let d = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::<f32>::new(vec![m, n], d).unwrap()
            };
            let (a, b, c) = (mk(3, 4), mk(4, 5), mk(5, 2));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }
    }
}

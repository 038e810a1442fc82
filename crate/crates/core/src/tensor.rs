//! Dense 4-D tensors in (batch, channel, height, width) row-major layout.

use std::fmt;
use std::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;
use crate::scalar::{DType, Scalar};

/// Tensor dimensions. All four extents are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(shape_err!("zero dimension in ({n}, {c}, {h}, {w})"));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| shape_err!("element count overflows for ({n}, {c}, {h}, {w})"))?;
        Ok(Shape4 { n, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per channel plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape4 { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape4 { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape4 { h, w, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape4, fill: T) -> Self {
        Tensor {
            shape,
            data: vec![fill; shape.len()],
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::new(shape, T::zero())
    }

    /// Shorthand that validates the dimensions first.
    pub fn filled(n: usize, c: usize, h: usize, w: usize, fill: T) -> Result<Self> {
        Ok(Self::new(Shape4::new(n, c, h, w)?, fill))
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_err!(
                "data length {} does not match shape {shape}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform draws in `[-scale, scale]`.
    pub fn random(shape: Shape4, rng: &mut RngStream, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Param(format!("random scale must be positive, got {scale}")));
        }
        let data = (0..shape.len())
            .map(|_| T::of_f64(rng.uniform(-scale, scale)))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// One `h*w` channel plane of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape.item();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.item();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(T::one(), other)
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// Sum accumulated in double precision, in storage order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// `Σ self·other`, accumulated in double precision.
    pub fn dot_f64(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn norm_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_f64(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{what}: shapes differ, {} vs {}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Batch items `range` as a new tensor.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.shape.n {
            return Err(shape_err!(
                "batch slice {range:?} outside 0..{}",
                self.shape.n
            ));
        }
        let s = self.shape.item();
        Ok(Tensor {
            shape: self.shape.with_n(range.len()),
            data: self.data[range.start * s..range.end * s].to_vec(),
        })
    }

    /// Stacks tensors along the batch axis; all must agree on (c, h, w).
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("stack_batch of zero tensors"))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(first.shape.n) != first.shape {
                return Err(shape_err!(
                    "stack_batch: {} incompatible with {}",
                    p.shape,
                    first.shape
                ));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_n(n),
            data,
        })
    }
}

/// Concatenates along channels: `a`'s channels first, then `b`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(shape_err!("concat_channels: {sa} and {sb} disagree on n, h, w"));
    }
    let shape = sa.with_c(sa.c + sb.c);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Ok(Tensor { shape, data })
}

/// Copies channels `range` into a new tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
    let s = x.shape;
    if range.start >= range.end || range.end > s.c {
        return Err(shape_err!("channel slice {range:?} outside 0..{}", s.c));
    }
    let shape = s.with_c(range.len());
    let p = s.plane();
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..s.n {
        let item = x.item(n);
        data.extend_from_slice(&item[range.start * p..range.end * p]);
    }
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn new_fills_every_element() {
        let t = Tensor::<f64>::new(sh(1, 1, 2, 2), 0.0);
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f64>::new(sh(1, 1, 1, 1), 3.5);
        assert_eq!(t.data(), &[3.5]);
        let t = Tensor::<f32>::new(sh(2, 3, 4, 4), 1.0);
        assert_eq!(t.len(), 96);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(Shape4::new(1, 0, 4, 4), Err(Error::Shape(_))));
        assert!(Tensor::<f64>::filled(0, 1, 1, 1, 0.0).is_err());
    }

    #[test]
    fn row_major_index_matches_sentinels() {
        let s = sh(2, 3, 4, 5);
        let mut t = Tensor::<f64>::zeros(s);
        t.set(1, 2, 3, 4, 7.0);
        t.set(0, 1, 2, 3, 5.0);
        assert_eq!(t.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
        assert_eq!(t.data()[(1 * 4 + 2) * 5 + 3], 5.0); // n = 0, c = 1
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn random_is_reproducible_and_bounded() {
        let s = sh(2, 2, 3, 3);
        let a = Tensor::<f64>::random(s, &mut RngStream::new(9), 0.1).unwrap();
        let b = Tensor::<f64>::random(s, &mut RngStream::new(9), 0.1).unwrap();
        let c = Tensor::<f64>::random(s, &mut RngStream::new(10), 0.1).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
        assert!(a.data().iter().all(|v| v.abs() <= 0.1));
        assert!(matches!(
            Tensor::<f64>::random(s, &mut RngStream::new(1), 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn concat_and_slice_shapes() {
        let a = Tensor::<f64>::new(sh(1, 2, 4, 4), 1.0);
        let b = Tensor::<f64>::new(sh(1, 3, 4, 4), 2.0);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), sh(1, 5, 4, 4));
        assert!(slice_channels(&ab, 0..2).unwrap().bit_eq(&a));
        assert!(slice_channels(&ab, 2..5).unwrap().bit_eq(&b));

        let x = Tensor::<f64>::new(sh(1, 4, 2, 2), 0.5);
        assert_eq!(slice_channels(&x, 0..2).unwrap().shape(), sh(1, 2, 2, 2));
        assert!(slice_channels(&x, 0..4).unwrap().bit_eq(&x));
        assert!(slice_channels(&x, 2..5).is_err());
        assert!(slice_channels(&x, 2..2).is_err());

        let bad = Tensor::<f64>::new(sh(1, 1, 2, 4), 0.0);
        assert!(matches!(concat_channels(&x, &bad), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn partition_roundtrip_is_bit_exact(
            n in 1usize..3, c in 2usize..6, h in 1usize..5, w in 1usize..5,
            k_frac in 0.0f64..1.0, seed in any::<u64>()
        ) {
            let k = 1 + ((c - 1) as f64 * k_frac) as usize % (c - 1);
            let x = Tensor::<f64>::random(sh(n, c, h, w), &mut RngStream::new(seed), 1.0).unwrap();
            let lo = slice_channels(&x, 0..k).unwrap();
            let hi = slice_channels(&x, k..c).unwrap();
            prop_assert!(concat_channels(&lo, &hi).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn stack_and_slice_batch() {
        let a = Tensor::<f64>::new(sh(1, 2, 2, 2), 1.0);
        let b = Tensor::<f64>::new(sh(2, 2, 2, 2), 2.0);
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape().n, 3);
        assert!(s.slice_batch(0..1).unwrap().bit_eq(&a));
        assert!(s.slice_batch(1..3).unwrap().bit_eq(&b));
    }
}

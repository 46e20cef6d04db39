//! Flat row-major arrays and the matrix kernels behind the tape ops.

use super::Scalar;
use crate::rng::Rng;

/// Dense row-major array, rank 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 4,
            "array rank must be 1..=4, got shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let len: usize = shape.iter().product();
        assert!(
            len == data.len() && !shape.is_empty() && shape.len() <= 4,
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Seeded i.i.d. normal entries with the given standard deviation.
    ///
    /// Values are drawn in f64 and narrowed, so f32 and f64 models built from
    /// the same seed agree up to rounding.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let mut out = Self::zeros(shape);
        for v in out.data.iter_mut() {
            *v = T::from_double(rng.normal() * std);
        }
        out
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single value of a scalar (length-1) array.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when viewed as a stack of rows over the last axis.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_double() * v.to_double())
            .sum::<f64>()
            .sqrt()
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Array<f64> {
        self.map(|v| v.to_double())
    }

    pub fn to_f32(&self) -> Array<f32> {
        self.map(|v| v.to_double() as f32)
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Lane-wise accumulator array; the fixed-width inner loop vectorizes to
    // a few independent FMA chains.
    const W: usize = 32;
    let mut acc = [T::zero(); W];
    let mut ca = a.chunks_exact(W);
    let mut cb = b.chunks_exact(W);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..W {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut s = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += *x * *y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// C += A(a×b) · B(b×c). `ikj` order: streams rows of B and C.
pub fn matmul_nn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(crow, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// C += A(a×b) · Bᵀ where B is (c×b).
///
/// B is transposed into scratch once so the accumulation runs through the
/// streaming `nn` kernel.
pub fn matmul_nt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        for (p, &v) in brow.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul_nn_acc(c, a, &bt, m, k, n);
}

/// C += Aᵀ · B where A is (b×a), B is (b×c): rank-1 updates, rows stay hot.
pub fn matmul_tn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(&mut c[i * n..(i + 1) * n], av, brow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let mut rng = Rng::new(5);
        let (m, k, n) = (7, 13, 11);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn_acc(&mut c, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // nt: B stored transposed (n×k).
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt_acc(&mut c, &a, &bt, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: A stored transposed (k×m).
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&mut c, &at, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "does not match data length")]
    fn from_vec_rejects_shape_mismatch() {
        let _ = Array::<f64>::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn identity_matmul_is_identity() {
        let n = 6;
        let mut eye = Array::<f64>::zeros(&[n, n]);
        for i in 0..n {
            eye.row_mut(i)[i] = 1.0;
        }
        let mut rng = Rng::new(9);
        let a = Array::<f64>::randn(&[n, n], 1.0, &mut rng);
        let mut c = vec![0.0; n * n];
        matmul_nn_acc(&mut c, eye.data(), a.data(), n, n, n);
        for (x, y) in c.iter().zip(a.data()) {
            assert_eq!(x, y);
        }
    }
}

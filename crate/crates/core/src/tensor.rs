//! Dense row-major `f64` tensors, a few linear-algebra kernels, and the
//! seeded counter-based random source everything else draws from.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![n, m], rows.concat())
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn expect_rank2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err!("expected rank 2, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (n, m) = self.expect_rank2()?;
        Ok(transpose_raw(&self.data, n, m))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = self.expect_rank2()?;
        let (k2, m) = other.expect_rank2()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &self.data, &other.data, &mut out, false);
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn trace(&self) -> Result<f64> {
        let (n, m) = self.expect_rank2()?;
        if n != m {
            return Err(shape_err!("trace of non-square {:?}", self.shape));
        }
        Ok((0..n).map(|i| self.data[i * n + i]).sum())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(shape_err!("empty shape"));
    }
    if shape.contains(&0) {
        return Err(shape_err!("zero-sized dimension in {:?}", shape));
    }
    Ok(())
}

pub(crate) fn transpose_raw(data: &[f64], n: usize, m: usize) -> Tensor {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = data[i * m + j];
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `c (+)= a[n×k] · b[k×m]`, row-major.
pub(crate) fn gemm(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: slices are bounds-checked against the dimensions below and the
    // strides describe dense row-major storage.
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            m as isize,
            1,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c (+)= aᵀ · b` where `a` is stored `[k×n]` and `b` is `[k×m]`.
pub(crate) fn gemm_tn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    let beta = if acc { 1.0 } else { 0.0 };
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    // SAFETY: as in `gemm`; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            1,
            n as isize,
            b.as_ptr(),
            m as isize,
            1,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c (+)= a · bᵀ` where `a` is `[n×k]` and `b` is stored `[m×k]`.
pub(crate) fn gemm_nt(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    let beta = if acc { 1.0 } else { 0.0 };
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    // SAFETY: as in `gemm`; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.expect_rank2()?;
    let mut out = logits.data.clone();
    for i in 0..n {
        softmax_in_place(&mut out[i * m..(i + 1) * m]);
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and a matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, n2) = m.expect_rank2()?;
    if n != n2 {
        return Err(shape_err!("eigendecomposition needs a square matrix"));
    }
    let mut a = m.data.clone();
    let mut v = Tensor::identity(n).data;
    let scale = a.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    Ok((eig, Tensor::from_parts(vec![n, n], v)))
}

pub fn is_symmetric(m: &Tensor, tol: f64) -> bool {
    let Ok((n, n2)) = m.expect_rank2() else {
        return false;
    };
    n == n2 && (0..n).all(|i| (0..i).all(|j| (m.get2(i, j) - m.get2(j, i)).abs() <= tol))
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Eigenvalues down to -1e-9 are clamped to zero.
pub fn psd_sqrt(m: &Tensor) -> Result<Tensor> {
    let (n, n2) = m.expect_rank2()?;
    if n != n2 {
        return Err(shape_err!("psd_sqrt needs a square matrix, got {:?}", m.shape));
    }
    if !is_symmetric(m, 1e-9) {
        return Err(Error::Domain("psd_sqrt: matrix is not symmetric".into()));
    }
    let (eig, vecs) = symmetric_eigen(m)?;
    if let Some(bad) = eig.iter().find(|&&e| e < -1e-9) {
        return Err(Error::Domain(format!(
            "psd_sqrt: negative eigenvalue {bad:e}"
        )));
    }
    let roots: Vec<f64> = eig.iter().map(|&e| e.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for (k, r) in roots.iter().enumerate() {
                s += vecs.data[i * n + k] * r * vecs.data[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
    // Symmetrize away rounding asymmetry.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = avg;
            out[j * n + i] = avg;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// Seeded counter-based random source (ChaCha8). Identical seeds give
/// identical streams; independent workers use [`Rng::split`].
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream `index` of this generator's seed. Does not
    /// advance `self`.
    pub fn split(&self, index: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(index.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Draws a fresh seed from this stream and returns a generator for it.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng {
            seed: state.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    validate_shape(shape)?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Uniform `[lo, hi)` tensor.
pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    validate_shape(shape)?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[vec![1e6, 0.0]]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        assert!(s.is_finite());

        let s = softmax_rows(&Tensor::from_rows(&[vec![2f64.ln(), 0.0, 0.0]]).unwrap()).unwrap();
        for (got, want) in s.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_wrong_rank() {
        assert!(matches!(
            softmax_rows(&Tensor::vector(vec![1.0, 2.0])),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            vals in prop::collection::vec(-50.0f64..50.0, 12),
            shift in -1e3f64..1e3,
        ) {
            let t = Tensor::new(vec![3, 4], vals).unwrap();
            let s = softmax_rows(&t).unwrap();
            for i in 0..3 {
                let row_sum: f64 = s.row(i).iter().sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
            let shifted = softmax_rows(&t.map(|v| v + shift)).unwrap();
            prop_assert!(close(&s, &shifted, 1e-12));
        }
    }

    #[test]
    fn psd_sqrt_examples() {
        let i4 = Tensor::identity(4);
        assert!(close(&psd_sqrt(&i4).unwrap(), &i4, 1e-12));
        let d = psd_sqrt(&Tensor::diag(&[4.0, 9.0])).unwrap();
        assert!(close(&d, &Tensor::diag(&[2.0, 3.0]), 1e-12));
    }

    #[test]
    fn psd_sqrt_reconstructs_random_psd() {
        let mut rng = Rng::new(11);
        for d in [2, 5, 16, 64] {
            let b = gaussian(&mut rng, &[d, d]).unwrap();
            let a = b.transpose().unwrap().matmul(&b).unwrap();
            let s = psd_sqrt(&a).unwrap();
            assert!(is_symmetric(&s, 1e-12));
            let err = s.matmul(&s).unwrap().sub(&a).unwrap().norm();
            assert!(err < 1e-6, "d={d} err={err}");
            let (eig, _) = symmetric_eigen(&s).unwrap();
            assert!(eig.iter().all(|&e| e > -1e-9));
        }
    }

    #[test]
    fn psd_sqrt_rejects_asymmetric() {
        let m = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_is_reproducible_and_standard() {
        let a = gaussian(&mut Rng::new(7), &[4, 5]).unwrap();
        let b = gaussian(&mut Rng::new(7), &[4, 5]).unwrap();
        assert_eq!(a, b);

        let g = gaussian(&mut Rng::new(3), &[100_000]).unwrap();
        let mean = g.mean();
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");

        assert!(matches!(gaussian(&mut Rng::new(1), &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn rng_state_roundtrip_and_split() {
        let mut r = Rng::new(5);
        r.normal();
        let st = r.state();
        let mut r2 = Rng::from_state(st);
        assert_eq!(r.next_u64(), r2.next_u64());
        let mut a = r.split(1);
        let mut b = r.split(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(2);
        let a = gaussian(&mut rng, &[3, 4]).unwrap();
        let b = gaussian(&mut rng, &[4, 5]).unwrap();
        let c = a.matmul(&b).unwrap();
        let mut naive = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                naive[i * 5 + j] = (0..4).map(|p| a.get2(i, p) * b.get2(p, j)).sum();
            }
        }
        assert!(close(&c, &Tensor::new(vec![3, 5], naive).unwrap(), 1e-12));

        let at = a.transpose().unwrap();
        let mut out = vec![0.0; 15];
        gemm_tn(3, 4, 5, at.data(), b.data(), &mut out, false);
        assert!(close(&c, &Tensor::new(vec![3, 5], out).unwrap(), 1e-12));

        let bt = b.transpose().unwrap();
        let mut out = vec![0.0; 15];
        gemm_nt(3, 4, 5, a.data(), bt.data(), &mut out, false);
        assert!(close(&c, &Tensor::new(vec![3, 5], out).unwrap(), 1e-12));
    }
}

//! Dense row-major tensors over f32/f64 plus the matmul kernels used by the
//! graph. Kernels may parallelize over output rows; results are identical for
//! any worker count.

use num_traits::{Float, NumCast};
use rayon::prelude::*;

/// Element types the differentiation core supports.
pub trait Scalar:
    Float + NumCast + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array. Operations produce fresh tensors; no aliasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| Scalar::to_f64(x)).collect()
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }
}

const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, out_row: &mut [T]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// out[m,n] = a[m,k] * b[n,k]^T  (row-by-row dot products)
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, out_row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// out[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let row = |j: usize, out_row: &mut [T]| {
        for i in 0..m {
            let av = a[i * k + j];
            if av != T::zero() {
                let brow = &b[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(j, r)| row(j, r));
    } else {
        for (j, r) in out.chunks_mut(n).enumerate() {
            row(j, r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let nn = matmul_nn(&a, &b, m, k, n);
        // b transposed layout [n,k]
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let nt = matmul_nt(&a, &bt, m, k, n);
        for (x, y) in nn.iter().zip(&nt) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T a via tn
        let tn = matmul_tn(&a, &a, m, k, k);
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += a[r * k + i] * a[r * k + j];
                }
                assert!((tn[i * k + j] - acc).abs() < 1e-12);
            }
        }
    }
}

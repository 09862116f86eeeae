//! Dense row-major 2D tensors over f32 (training) or f64 (gradient-check
//! mode). Vectors are single-row or single-column tensors; scalars are 1x1.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rayon::prelude::*;

/// Scalar element of a tensor. Implemented for f32 and f64; f64 is used
/// to re-run graphs for finite-difference checks.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxv(self, o: Self) -> Self {
                self.max(o)
            }
            fn minv(self, o: Self) -> Self {
                self.min(o)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<E>,
}

impl<E: Real> Tensor<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![E::ZERO; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: E) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut E {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&e| f(e)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor<E> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|e| e.is_finite())
    }

    pub fn add_assign_t(&mut self, other: &Tensor<E>) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn to_f64_t(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|e| e.to_f64()).collect(),
        }
    }

    pub fn to_f32_t(&self) -> Tensor<f32> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|e| e.to_f64() as f32).collect(),
        }
    }

    pub fn from_f32_t(src: &Tensor<f32>) -> Tensor<E> {
        Tensor {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&e| E::from_f64(e as f64)).collect(),
        }
    }
}

// Parallelism threshold: rows below this run serially. Each output row is
// produced by exactly one task with a fixed inner order, so results are
// bit-identical for any thread count.
const PAR_ROWS: usize = 64;
const PAR_WORK: usize = 1 << 16;

/// C = A (m x k) * B (k x n)
pub fn matmul_nn<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![E::ZERO; m * n];
    let work = m * k * n;
    let row_job = |i: usize, out_row: &mut [E]| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_ROWS && work >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    Tensor::from_vec(m, n, out)
}

/// C = A (m x k) * B^T (n x k) -> (m x n)
pub fn matmul_nt<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![E::ZERO; m * n];
    let work = m * k * n;
    let row_job = |i: usize, out_row: &mut [E]| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m >= PAR_ROWS && work >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    Tensor::from_vec(m, n, out)
}

/// C = A^T (m x k) * B (m x n) -> (k x n)
pub fn matmul_tn<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![E::ZERO; k * n];
    let work = m * k * n;
    let row_job = |kk: usize, out_row: &mut [E]| {
        for i in 0..m {
            let av = a.data[i * k + kk];
            let b_row = &b.data[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if k >= PAR_ROWS && work >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, row)| row_job(kk, row));
    } else {
        for (kk, row) in out.chunks_mut(n).enumerate() {
            row_job(kk, row);
        }
    }
    Tensor::from_vec(k, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity() {
        let mut id = Tensor::<f64>::zeros(3, 3);
        for i in 0..3 {
            *id.at_mut(i, i) = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, 3, 5);
        assert_eq!(matmul_nn(&id, &a), a);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, 7, 4);
        let b = rand_t(&mut rng, 4, 6);
        let nn = matmul_nn(&a, &b);
        let nt = matmul_nt(&a, &b.transpose());
        let tn = matmul_tn(&a.transpose(), &b);
        for (x, y) in nn.data.iter().zip(&nt.data) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nn.data.iter().zip(&tn.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_path_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&mut rng, 128, 64);
        let b = rand_t(&mut rng, 64, 96);
        let big = matmul_nn(&a, &b);
        // serial reference
        let mut refv = Tensor::<f64>::zeros(128, 96);
        for i in 0..128 {
            for kk in 0..64 {
                for j in 0..96 {
                    *refv.at_mut(i, j) += a.at(i, kk) * b.at(kk, j);
                }
            }
        }
        assert_eq!(big, refv);
    }
}

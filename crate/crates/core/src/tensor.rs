//! Dense row-major tensors and the numeric kernels shared by the autodiff graph.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating-point element type. `f32` is used for training and inference,
/// `f64` only for gradient checks.
pub trait Scalar: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }
}

/// Layout of one operand of a batched matrix product.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub transposed: bool,
}

const SMALL_GEMM: usize = 4096;

/// Batched `c[b] (+)= op(a[b]) · op(b[b])` where `op(a)` is `m × k` and
/// `op(b)` is `k × n`. A batch stride of zero broadcasts that operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm_batched<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: MatLayout,
    a_batch_stride: usize,
    b: &[T],
    b_layout: MatLayout,
    b_batch_stride: usize,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_layout.transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_layout.transposed { (1, k) } else { (n, 1) };
    debug_assert!(c.len() >= batch * m * n);
    for bi in 0..batch {
        let a_off = bi * a_batch_stride;
        let b_off = bi * b_batch_stride;
        let c_blk = &mut c[bi * m * n..(bi + 1) * m * n];
        if !accumulate {
            c_blk.iter_mut().for_each(|v| *v = T::zero());
        }
        if m * n * k <= SMALL_GEMM {
            let a_blk = &a[a_off..];
            let b_blk = &b[b_off..];
            for i in 0..m {
                let row = &mut c_blk[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a_blk[i * rsa + p * csa];
                    if av == T::zero() {
                        continue;
                    }
                    if csb == 1 {
                        let brow = &b_blk[p * rsb..p * rsb + n];
                        for (cv, &bv) in row.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    } else {
                        for (j, cv) in row.iter_mut().enumerate() {
                            *cv += av * b_blk[p * rsb + j * csb];
                        }
                    }
                }
            }
        } else {
            let a_len = m * k;
            let b_len = k * n;
            assert!(a_off + a_len <= a.len() && b_off + b_len <= b.len());
            // SAFETY: bounds checked above; c_blk is a distinct mutable slice.
            unsafe {
                T::gemm_raw(
                    m,
                    k,
                    n,
                    a.as_ptr().add(a_off),
                    rsa as isize,
                    csa as isize,
                    b.as_ptr().add(b_off),
                    rsb as isize,
                    csb as isize,
                    T::one(),
                    c_blk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_layouts_and_sizes() {
        for &(m, k, n) in &[(3, 4, 5), (20, 17, 33)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            for ta in [false, true] {
                for tb in [false, true] {
                    let mut c = vec![0.0; m * n];
                    gemm_batched(
                        1,
                        m,
                        k,
                        n,
                        &a,
                        MatLayout { transposed: ta },
                        0,
                        &b,
                        MatLayout { transposed: tb },
                        0,
                        &mut c,
                        false,
                    );
                    let want = naive(m, k, n, &a, ta, &b, tb);
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-12, "{ta} {tb} {m}x{k}x{n}");
                    }
                }
            }
        }
    }
}

//! Dense row-major tensors over f32 (training and inference) or f64
//! (gradient checking), plus the gemm entry point both precisions share.

use crate::imgproc::RasterImage;
use crate::{Error, Result};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type a network can run in. Implemented for f32 and f64 only;
/// f64 exists solely so finite-difference gradient checks have headroom.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Default
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype tag used by the weight-archive format.
    const DTYPE: &'static str;
    /// Serialized width in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C = alpha * A(m,k) * B(k,n) + beta * C(m,n) with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents, C must not alias A or B.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: &'static str = $dtype;
            const BYTES: usize = $bytes;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                Self::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
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
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, "f32", 4, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", 8, matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent, conventionally the batch dimension.
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per leading-dimension slice.
    #[inline]
    pub fn per_sample(&self) -> usize {
        let b = self.batch();
        if b == 0 {
            0
        } else {
            self.numel() / b
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({n})",
                self.shape,
                self.numel()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Convert precision elementwise; used to lift f32 networks into the
    /// f64 gradient-check mode.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Stack same-shape sample tensors into one batch tensor with a new
/// leading dimension.
pub fn stack<T: Scalar>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stack zero tensors".into()))?;
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    for s in samples {
        if s.shape != first.shape {
            return Err(Error::ShapeMismatch(format!(
                "stack: shape {:?} vs {:?}",
                s.shape, first.shape
            )));
        }
        data.extend_from_slice(&s.data);
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&first.shape);
    Ok(Tensor { shape, data })
}

/// Image to a [channels, height, width] tensor with values scaled to [0, 1].
pub fn image_to_tensor<T: Scalar>(img: &RasterImage) -> Tensor<T> {
    let (c, h, w) = (img.channels, img.height, img.width);
    let mut data = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = T::from_f64(img.get(x, y, ch) as f64 / 255.0);
            }
        }
    }
    Tensor {
        shape: vec![c, h, w],
        data,
    }
}

/// C = alpha * op(A) * op(B) + beta * C for row-major slices.
///
/// `a` holds an (m, k) matrix, or its (k, m) transpose source when `ta`;
/// `b` holds (k, n), or (n, k) when `tb`; `c` is always (m, n).
pub fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[T],
    b: &[T],
    beta: f64,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: a length");
    assert_eq!(b.len(), k * n, "gemm: b length");
    assert_eq!(c.len(), m * n, "gemm: c length");
    let (rsa, csa) = if ta {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::from_f64(alpha),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::from_f64(beta),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let at = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
        let bt = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += at(i, l) * bt(l, j);
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_oracle_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            for _ in 0..10 {
                let (m, k, n) = (
                    rng.gen_range(1..8),
                    rng.gen_range(1..8),
                    rng.gen_range(1..8),
                );
                let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, k, n, 1.0, &a, &b, 0.0, &mut c);
                let want = naive_matmul(ta, tb, m, k, n, &a, &b);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [10.0f64, 20.0, 30.0, 40.0];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn tensor_shape_bookkeeping() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.numel(), 24);
        assert_eq!(t.batch(), 2);
        assert_eq!(t.per_sample(), 12);
        assert!(Tensor::<f32>::from_data(&[2, 2], vec![0.0; 3]).is_err());
        let r = t.reshape(&[6, 4]).unwrap();
        assert_eq!(r.shape, vec![6, 4]);
        assert!(r.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn stack_checks_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2, 2]);
        let s = stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape, vec![2, 2, 2]);
        let c = Tensor::<f32>::zeros(&[3]);
        assert!(stack(&[a, c]).is_err());
        assert!(stack::<f32>(&[]).is_err());
    }

    #[test]
    fn image_to_tensor_layout_and_scale() {
        let mut img = RasterImage::new(2, 2, 3);
        img.set(1, 0, 2, 255);
        img.set(0, 1, 0, 51);
        let t = image_to_tensor::<f32>(&img);
        assert_eq!(t.shape, vec![3, 2, 2]);
        // Channel 2, row 0, col 1.
        assert_eq!(t.data[(2 * 2 + 0) * 2 + 1], 1.0);
        // Channel 0, row 1, col 0.
        assert!((t.data[(0 * 2 + 1) * 2 + 0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn cast_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f32>::from_data(
            &[3, 3],
            (0..9).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}

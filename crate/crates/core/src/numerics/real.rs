//! Floating-point element trait and the dense matrix-multiply kernel.
//!
//! Training runs in `f32`; the gradient-check harness runs the same graph in
//! `f64`. Everything numeric is generic over [`Real`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` on strided row/column views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the stated sizes.
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

    fn erf(self) -> Self;

    /// `exp` as used inside activation kernels.
    fn act_exp(self) -> Self {
        self.exp()
    }

    /// `tanh` as used inside activation kernels.
    fn act_tanh(self) -> Self {
        self.tanh()
    }

    /// Lossless-enough conversion from `f64` used for constants.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn erf(self) -> f32 {
        fast_erf_f32(self)
    }

    fn act_exp(self) -> f32 {
        fast_exp_f32(self)
    }

    fn act_tanh(self) -> f32 {
        fast_tanh_f32(self)
    }
}

// Single-precision activations. glibc's expf/tanhf and libm's erff were a
// third of training time; these inline forms stay within a few ulp (erf
// within 5e-7 absolute), which is below f32 training noise. f64 keeps the
// library functions so gradient checks are unaffected.

#[inline]
fn fast_exp_f32(x: f32) -> f32 {
    if x < -87.0 {
        return 0.0;
    }
    if x > 88.0 {
        return f32::INFINITY;
    }
    let n = (x * std::f32::consts::LOG2_E).round();
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let z = r * r;
    let p = (((((1.987_569_1e-4 * r + 1.398_2e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 0.166_666_65) * r
        + 0.5)
        * z
        + r
        + 1.0;
    // 2^n stays a normal number in this range; NaN falls through p
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

#[inline]
fn fast_tanh_f32(x: f32) -> f32 {
    let a = x.abs();
    if a < 0.625 {
        let z = x * x;
        ((((-5.704_988_7e-3 * z + 2.063_908_9e-2) * z - 5.373_971_6e-2) * z + 0.133_314_42) * z - 0.333_332_82) * z * x + x
    } else {
        let y = 1.0 - 2.0 / (fast_exp_f32(2.0 * a) + 1.0);
        y.copysign(x)
    }
}

#[inline]
fn fast_erf_f32(x: f32) -> f32 {
    let a = x.abs();
    let t = 1.0 / (1.0 + 0.5 * a);
    let poly = -1.265_512_2
        + t * (1.000_023_7
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07 + t * (-1.135_204 + t * (1.488_515_9 + t * (-0.822_152_2 + t * 0.170_872_77))))))));
    let erfc = t * fast_exp_f32(-a * a + poly);
    (1.0 - erfc).copysign(x)
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

/// Row-major matrix product `C (+)= op(A) * op(B)` with `op(A)` of size
/// `m x k` and `op(B)` of size `k x n`.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is stored `k x n`
/// (or `n x k` when `tb`). When `accumulate` is false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths were checked against the stated dimensions and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                matmul(m, k, n, &a, ta, &b, tb, &mut c, false);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        matmul(1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn fast_f32_activations_track_f64() {
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for i in -40000..=40000 {
            let x = i as f64 * 5e-4;
            let xf = x as f32;
            let xd = xf as f64;
            let e_rel = ((xf.act_exp() as f64) - xd.exp()).abs() / xd.exp();
            let t_abs = ((xf.act_tanh() as f64) - xd.tanh()).abs();
            let f_abs = ((Real::erf(xf) as f64) - libm::erf(xd)).abs();
            worst = (worst.0.max(e_rel), worst.1.max(t_abs), worst.2.max(f_abs));
        }
        assert!(worst.0 < 3e-7, "exp {worst:?}");
        assert!(worst.1 < 3e-7, "tanh {worst:?}");
        assert!(worst.2 < 5e-7, "erf {worst:?}");
        assert_eq!(f32::NEG_INFINITY.act_exp(), 0.0);
        assert_eq!(f32::INFINITY.act_exp(), f32::INFINITY);
        assert!(f32::NAN.act_exp().is_nan());
        assert!(f32::NAN.act_tanh().is_nan());
        assert!(Real::erf(f32::NAN).is_nan());
        assert_eq!(100f32.act_tanh(), 1.0);
        assert_eq!((-100f32).act_tanh(), -1.0);
        assert_eq!(0f32.act_tanh(), 0.0);
        assert_eq!(Real::erf(f32::INFINITY), 1.0);
        assert_eq!(1.0f64.act_exp(), 1.0f64.exp());
    }
}

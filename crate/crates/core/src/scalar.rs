//! Scalar abstraction over the two supported float widths.
//!
//! The whole numeric stack is generic over [`Scalar`], instantiated as
//! `f32` for training and inference and as `f64` for finite-difference
//! verification. A tape is monomorphic in its scalar, so mixing widths
//! inside one graph is a compile error rather than a runtime check.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Float width marker, mostly for reporting and format headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    Bits32,
    Bits64,
}

/// Closed set of element types the tape can compute with.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Default
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
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const WIDTH: FloatWidth;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn maxs(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    fn mins(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }

    fn clamp01(self) -> Self {
        self.maxs(Self::ZERO).mins(Self::ONE)
    }

    /// Bulk `c[i] += s * b[i]` over equal-length slices.
    ///
    /// The inner loop of every matrix product runs through here, so
    /// `f32` overrides it with a vectorized path. Any override must
    /// keep the exact per-element operation order (one multiply, one
    /// add, no fused contraction) so results are bit-identical to this
    /// default regardless of the instruction set in use.
    fn axpy(s: Self, b: &[Self], c: &mut [Self]) {
        debug_assert_eq!(b.len(), c.len());
        for (cj, bj) in c.iter_mut().zip(b) {
            *cj += s * *bj;
        }
    }

    /// Four simultaneous `axpy` passes over one shared `b` row.
    ///
    /// Semantically identical to four `axpy` calls; exists so matrix
    /// kernels read each `b` row once per four output rows. The same
    /// bit-exactness contract as `axpy` applies.
    fn axpy4(s: [Self; 4], b: &[Self], c: [&mut [Self]; 4]) {
        let [c0, c1, c2, c3] = c;
        Self::axpy(s[0], b, c0);
        Self::axpy(s[1], b, c1);
        Self::axpy(s[2], b, c2);
        Self::axpy(s[3], b, c3);
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const WIDTH: FloatWidth = FloatWidth::Bits32;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn axpy(s: Self, b: &[Self], c: &mut [Self]) {
        debug_assert_eq!(b.len(), c.len());
        #[cfg(target_arch = "x86_64")]
        {
            match simd_level() {
                SimdLevel::Avx512 => {
                    // Safety: feature presence checked at runtime.
                    unsafe { axpy_f32_avx512(s, b, c) };
                    return;
                }
                SimdLevel::Avx2 => {
                    // Safety: feature presence checked at runtime.
                    unsafe { axpy_f32_avx2(s, b, c) };
                    return;
                }
                SimdLevel::None => {}
            }
        }
        for (cj, bj) in c.iter_mut().zip(b) {
            *cj += s * *bj;
        }
    }

    fn axpy4(s: [Self; 4], b: &[Self], c: [&mut [Self]; 4]) {
        #[cfg(target_arch = "x86_64")]
        {
            match simd_level() {
                SimdLevel::Avx512 => {
                    // Safety: feature presence checked at runtime.
                    unsafe { axpy4_f32_avx512(s, b, c) };
                    return;
                }
                SimdLevel::Avx2 => {
                    // Safety: feature presence checked at runtime.
                    unsafe { axpy4_f32_avx2(s, b, c) };
                    return;
                }
                SimdLevel::None => {}
            }
        }
        let [c0, c1, c2, c3] = c;
        Self::axpy(s[0], b, c0);
        Self::axpy(s[1], b, c1);
        Self::axpy(s[2], b, c2);
        Self::axpy(s[3], b, c3);
    }
}

#[cfg(target_arch = "x86_64")]
#[derive(Clone, Copy, PartialEq, Eq)]
enum SimdLevel {
    None,
    Avx2,
    Avx512,
}

#[cfg(target_arch = "x86_64")]
fn simd_level() -> SimdLevel {
    use std::sync::atomic::{AtomicU8, Ordering};
    static STATE: AtomicU8 = AtomicU8::new(0);
    match STATE.load(Ordering::Relaxed) {
        1 => SimdLevel::None,
        2 => SimdLevel::Avx2,
        3 => SimdLevel::Avx512,
        _ => {
            let level = if std::arch::is_x86_feature_detected!("avx512f") {
                SimdLevel::Avx512
            } else if std::arch::is_x86_feature_detected!("avx2") {
                SimdLevel::Avx2
            } else {
                SimdLevel::None
            };
            let tag = match level {
                SimdLevel::None => 1,
                SimdLevel::Avx2 => 2,
                SimdLevel::Avx512 => 3,
            };
            STATE.store(tag, Ordering::Relaxed);
            level
        }
    }
}

/// Eight-lane version of the default `axpy`. Uses separate multiply
/// and add (no FMA) so every lane performs the same two roundings as
/// the scalar loop and the result is bitwise identical to it.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_f32_avx2(s: f32, b: &[f32], c: &mut [f32]) {
    use std::arch::x86_64::*;
    let n = c.len();
    let sv = _mm256_set1_ps(s);
    let mut j = 0;
    while j + 8 <= n {
        let bv = _mm256_loadu_ps(b.as_ptr().add(j));
        let cv = _mm256_loadu_ps(c.as_ptr().add(j));
        let r = _mm256_add_ps(cv, _mm256_mul_ps(sv, bv));
        _mm256_storeu_ps(c.as_mut_ptr().add(j), r);
        j += 8;
    }
    while j < n {
        *c.get_unchecked_mut(j) += s * *b.get_unchecked(j);
        j += 1;
    }
}

/// Four-row variant of [`axpy_f32_avx2`]; each `b` load feeds four
/// independent multiply/add pairs, one per destination row.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy4_f32_avx2(s: [f32; 4], b: &[f32], c: [&mut [f32]; 4]) {
    use std::arch::x86_64::*;
    let n = b.len();
    let [c0, c1, c2, c3] = c;
    debug_assert!(c0.len() == n && c1.len() == n && c2.len() == n && c3.len() == n);
    let sv0 = _mm256_set1_ps(s[0]);
    let sv1 = _mm256_set1_ps(s[1]);
    let sv2 = _mm256_set1_ps(s[2]);
    let sv3 = _mm256_set1_ps(s[3]);
    let (p0, p1, p2, p3) = (
        c0.as_mut_ptr(),
        c1.as_mut_ptr(),
        c2.as_mut_ptr(),
        c3.as_mut_ptr(),
    );
    let mut j = 0;
    while j + 8 <= n {
        let bv = _mm256_loadu_ps(b.as_ptr().add(j));
        _mm256_storeu_ps(
            p0.add(j),
            _mm256_add_ps(_mm256_loadu_ps(p0.add(j)), _mm256_mul_ps(sv0, bv)),
        );
        _mm256_storeu_ps(
            p1.add(j),
            _mm256_add_ps(_mm256_loadu_ps(p1.add(j)), _mm256_mul_ps(sv1, bv)),
        );
        _mm256_storeu_ps(
            p2.add(j),
            _mm256_add_ps(_mm256_loadu_ps(p2.add(j)), _mm256_mul_ps(sv2, bv)),
        );
        _mm256_storeu_ps(
            p3.add(j),
            _mm256_add_ps(_mm256_loadu_ps(p3.add(j)), _mm256_mul_ps(sv3, bv)),
        );
        j += 8;
    }
    while j < n {
        let bj = *b.get_unchecked(j);
        *p0.add(j) += s[0] * bj;
        *p1.add(j) += s[1] * bj;
        *p2.add(j) += s[2] * bj;
        *p3.add(j) += s[3] * bj;
        j += 1;
    }
}

/// Sixteen-lane version of the default `axpy`; same no-FMA contract.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn axpy_f32_avx512(s: f32, b: &[f32], c: &mut [f32]) {
    use std::arch::x86_64::*;
    let n = c.len();
    let sv = _mm512_set1_ps(s);
    let mut j = 0;
    while j + 16 <= n {
        let bv = _mm512_loadu_ps(b.as_ptr().add(j));
        let cv = _mm512_loadu_ps(c.as_ptr().add(j));
        let r = _mm512_add_ps(cv, _mm512_mul_ps(sv, bv));
        _mm512_storeu_ps(c.as_mut_ptr().add(j), r);
        j += 16;
    }
    while j < n {
        *c.get_unchecked_mut(j) += s * *b.get_unchecked(j);
        j += 1;
    }
}

/// Sixteen-lane version of [`axpy4_f32_avx2`]; same no-FMA contract.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn axpy4_f32_avx512(s: [f32; 4], b: &[f32], c: [&mut [f32]; 4]) {
    use std::arch::x86_64::*;
    let n = b.len();
    let [c0, c1, c2, c3] = c;
    debug_assert!(c0.len() == n && c1.len() == n && c2.len() == n && c3.len() == n);
    let sv0 = _mm512_set1_ps(s[0]);
    let sv1 = _mm512_set1_ps(s[1]);
    let sv2 = _mm512_set1_ps(s[2]);
    let sv3 = _mm512_set1_ps(s[3]);
    let (p0, p1, p2, p3) = (
        c0.as_mut_ptr(),
        c1.as_mut_ptr(),
        c2.as_mut_ptr(),
        c3.as_mut_ptr(),
    );
    let mut j = 0;
    while j + 16 <= n {
        let bv = _mm512_loadu_ps(b.as_ptr().add(j));
        _mm512_storeu_ps(
            p0.add(j),
            _mm512_add_ps(_mm512_loadu_ps(p0.add(j)), _mm512_mul_ps(sv0, bv)),
        );
        _mm512_storeu_ps(
            p1.add(j),
            _mm512_add_ps(_mm512_loadu_ps(p1.add(j)), _mm512_mul_ps(sv1, bv)),
        );
        _mm512_storeu_ps(
            p2.add(j),
            _mm512_add_ps(_mm512_loadu_ps(p2.add(j)), _mm512_mul_ps(sv2, bv)),
        );
        _mm512_storeu_ps(
            p3.add(j),
            _mm512_add_ps(_mm512_loadu_ps(p3.add(j)), _mm512_mul_ps(sv3, bv)),
        );
        j += 16;
    }
    while j < n {
        let bj = *b.get_unchecked(j);
        *p0.add(j) += s[0] * bj;
        *p1.add(j) += s[1] * bj;
        *p2.add(j) += s[2] * bj;
        *p3.add(j) += s[3] * bj;
        j += 1;
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const WIDTH: FloatWidth = FloatWidth::Bits64;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

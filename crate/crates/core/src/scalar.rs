//! Floating-point scalar abstraction.

use std::fmt;
use std::iter::Sum;

use ndarray::{Array2, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distr::uniform::SampleUniform;

/// Scalar type the whole crate is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + SampleUniform
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` literals and constants.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    /// Minimum chromaticity value; illuminant maps are clamped to this
    /// before metrics and correction.
    fn epsilon_chroma() -> Self {
        Self::from_f64_c(1e-4)
    }

    /// Degrees per radian.
    fn rad_to_deg() -> Self {
        Self::from_f64_c(180.0 / std::f64::consts::PI)
    }

    /// Dense matrix product `a * b`, routed through a vectorized kernel.
    fn matmul(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        let (m, k) = a.dim();
        let (_, n) = b.dim();
        match (contiguous_desc(a), contiguous_desc(b)) {
            (Some((sa, ars, acs)), Some((sb, brs, bcs))) => {
                let mut c = Array2::zeros((m, n));
                Self::gemm(
                    m,
                    k,
                    n,
                    sa,
                    ars,
                    acs,
                    sb,
                    brs,
                    bcs,
                    c.as_slice_mut().unwrap(),
                    n,
                    false,
                );
                c
            }
            _ => a.dot(&b),
        }
    }

    /// `c = a * b` (or `c += a * b` when `add`) over strided operands.
    /// Operands are (slice, row stride, col stride) with one stride equal
    /// to 1; `c` is row major with row stride `crs`. Slices must span the
    /// operands exactly.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ars: usize,
        acs: usize,
        b: &[Self],
        brs: usize,
        bcs: usize,
        c: &mut [Self],
        crs: usize,
        add: bool,
    ) {
        gemm_ref(m, k, n, a, ars, acs, b, brs, bcs, c, crs, add);
    }
}

/// Describes a view that is standard or transposed-standard layout as
/// (slice, row stride, col stride).
fn contiguous_desc<'a, T>(v: ArrayView2<'a, T>) -> Option<(&'a [T], usize, usize)> {
    let (m, n) = v.dim();
    if let Some(s) = v.to_slice() {
        return Some((s, n, 1));
    }
    v.reversed_axes().to_slice().map(|s| (s, 1, m))
}

#[allow(clippy::too_many_arguments)]
fn gemm_ref<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ars: usize,
    acs: usize,
    b: &[T],
    brs: usize,
    bcs: usize,
    c: &mut [T],
    crs: usize,
    add: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * ars + p * acs] * b[p * brs + j * bcs];
            }
            let dst = &mut c[i * crs + j];
            *dst = if add { *dst + acc } else { acc };
        }
    }
}

fn faer_view<'a, T>(s: &'a [T], m: usize, n: usize, rs: usize, cs: usize) -> Option<faer::MatRef<'a, T>> {
    if cs == 1 {
        Some(faer::MatRef::from_row_major_slice_with_stride(s, m, n, rs))
    } else if rs == 1 {
        Some(faer::MatRef::from_column_major_slice_with_stride(s, m, n, cs))
    } else {
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_faer<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ars: usize,
    acs: usize,
    b: &[T],
    brs: usize,
    bcs: usize,
    c: &mut [T],
    crs: usize,
    add: bool,
) -> bool
where
    T: Scalar + faer::traits::ComplexField,
{
    let (fa, fb) = match (faer_view(a, m, k, ars, acs), faer_view(b, k, n, brs, bcs)) {
        (Some(fa), Some(fb)) => (fa, fb),
        _ => return false,
    };
    // a row-major (m, n) destination is the transpose of a column-major
    // (n, m) matrix whose column stride is the row stride
    // (faer 0.24's from_row_major_slice_with_stride_mut sets its strides
    // incorrectly, so build the view through the column-major constructor)
    let fc = faer::MatMut::from_column_major_slice_with_stride_mut(c, n, m, crs).transpose_mut();
    let accum = if add { faer::Accum::Add } else { faer::Accum::Replace };
    faer::linalg::matmul::matmul(fc, accum, fa, fb, T::one(), faer::Par::Seq);
    true
}

impl Scalar for f32 {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ars: usize,
        acs: usize,
        b: &[Self],
        brs: usize,
        bcs: usize,
        c: &mut [Self],
        crs: usize,
        add: bool,
    ) {
        if !gemm_faer(m, k, n, a, ars, acs, b, brs, bcs, c, crs, add) {
            gemm_ref(m, k, n, a, ars, acs, b, brs, bcs, c, crs, add);
        }
    }
}

impl Scalar for f64 {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ars: usize,
        acs: usize,
        b: &[Self],
        brs: usize,
        bcs: usize,
        c: &mut [Self],
        crs: usize,
        add: bool,
    ) {
        if !gemm_faer(m, k, n, a, ars, acs, b, brs, bcs, c, crs, add) {
            gemm_ref(m, k, n, a, ars, acs, b, brs, bcs, c, crs, add);
        }
    }
}

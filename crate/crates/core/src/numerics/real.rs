use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A strided, read-only matrix view over a flat buffer.
///
/// `row_stride` and `col_stride` are in elements, so a transposed view of a
/// row-major `r x c` buffer is `(rows: c, cols: r, row_stride: 1, col_stride: c)`.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatView<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    /// View of a contiguous column block `[start, start + width)`.
    pub fn cols(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        let offset = start * self.col_stride;
        MatView {
            data: &self.data[offset.min(self.data.len())..],
            rows: self.rows,
            cols: width,
            row_stride: self.row_stride,
            col_stride: self.col_stride,
        }
    }
}

/// Floating-point scalar usable by the tape: `f64` for gradient checks and
/// oracles, `f32` for training and benchmarks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Bytes per element, used by the allocation counter.
    const BYTES: usize;

    fn of(x: f64) -> Self;

    fn erf(self) -> Self;

    /// `out = beta * out + a * b` with `out` row-major `a.rows x b.cols`.
    fn gemm(a: MatView<'_, Self>, b: MatView<'_, Self>, beta: Self, out: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $erf:path) => {
        impl Real for $t {
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(a: MatView<'_, Self>, b: MatView<'_, Self>, beta: Self, out: &mut [Self]) {
                assert_eq!(a.cols, b.rows, "gemm inner dimension");
                let (m, k, n) = (a.rows, a.cols, b.cols);
                assert_eq!(out.len(), m * n, "gemm output size");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    out.iter_mut().for_each(|x| *x *= beta);
                    return;
                }
                let last_a = (m - 1) * a.row_stride + (k - 1) * a.col_stride;
                let last_b = (k - 1) * b.row_stride + (n - 1) * b.col_stride;
                assert!(last_a < a.data.len() && last_b < b.data.len());
                // SAFETY: the asserts above bound every strided access inside the
                // borrowed slices, and `out` is exactly m*n row-major.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, libm::erff);
impl_real!(f64, matrixmultiply::dgemm, libm::erf);

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, E> {
    pub data: &'a [E],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, E> MatRef<'a, E> {
    /// Row-major contiguous `rows × cols` view.
    pub fn row_major(data: &'a [E], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of this view (no copy).
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
#[derive(Debug)]
pub struct MatMut<'a, E> {
    pub data: &'a mut [E],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, E> MatMut<'a, E> {
    pub fn row_major(data: &'a mut [E], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Floating-point scalar the engine computes in. `f32` is the working
/// precision; `f64` exists for gradient checking.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha · a·b + beta · c`.
    fn gemm_raw(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>);

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

macro_rules! impl_element {
    ($ty:ty, $name:literal, $gemm:path) => {
        impl Element for $ty {
            const DTYPE: &'static str = $name;

            fn gemm_raw(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                assert_eq!(a.cols, b.rows, "gemm inner dimension");
                assert_eq!(a.rows, c.rows, "gemm output rows");
                assert_eq!(b.cols, c.cols, "gemm output cols");
                if c.rows == 0 || c.cols == 0 {
                    return;
                }
                a.check();
                b.check();
                c.check();
                // SAFETY: every view was bounds-checked against its slice above,
                // and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        a.rows,
                        a.cols,
                        b.cols,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

/// Convenience wrapper: `c = a·b + beta·c` for row-major operands.
pub fn gemm<E: Element>(alpha: E, a: MatRef<'_, E>, b: MatRef<'_, E>, beta: E, c: MatMut<'_, E>) {
    if a.cols == 0 {
        // matrixmultiply handles k = 0 but we still want beta applied.
        let MatMut { data, rows, cols, row_stride, col_stride } = c;
        for i in 0..rows {
            for j in 0..cols {
                let v = &mut data[i * row_stride + j * col_stride];
                *v = if beta == E::zero() { E::zero() } else { *v * beta };
            }
        }
        return;
    }
    E::gemm_raw(alpha, a, b, beta, c);
}

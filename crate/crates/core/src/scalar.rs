//! Floating-point abstraction shared by every numeric module.
//!
//! All math in the crate is written against [`Scalar`], which is implemented
//! for `f32` and `f64`. Dense matrix products are routed to the matching
//! `matrixmultiply` kernel so both precisions get vectorised GEMM.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar type usable throughout the simulator.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;
    /// Short type name recorded in file headers.
    const NAME: &'static str;

    /// Converts an `f64` literal or computed value.
    fn lit(x: f64) -> Self;

    /// Widens to `f64`.
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety contract
    /// Callers pass slices large enough for the described strided views; this
    /// is checked by the safe wrappers in `netcore`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly [`Scalar::BYTES`] bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const BYTES: usize = std::mem::size_of::<$t>();
            const NAME: &'static str = $name;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the netcore wrappers assert that every strided view
                // lies inside its slice before calling in.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; std::mem::size_of::<$t>()];
                raw.copy_from_slice(bytes);
                <$t>::from_le_bytes(raw)
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(x: S) -> S {
        let mut buf = Vec::new();
        x.write_le(&mut buf);
        assert_eq!(buf.len(), S::BYTES);
        S::read_le(&buf)
    }

    #[test]
    fn le_encoding_is_bit_exact() {
        for x in [0.0f64, -1.5, f64::MIN_POSITIVE, 1.0 / 3.0] {
            assert_eq!(roundtrip(x).to_bits(), x.to_bits());
        }
        assert_eq!(roundtrip(0.1f32).to_bits(), 0.1f32.to_bits());
    }

    #[test]
    fn gemm_small_product() {
        // [1 2; 3 4] * [5; 6] = [17; 39]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        f64::gemm(2, 2, 1, 1.0, &a, 2, 1, &b, 1, 1, 0.0, &mut c, 1, 1);
        assert_eq!(c, [17.0, 39.0]);
    }
}

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar for all numeric kernels: f32 or f64.
///
/// Everything numeric in this crate is generic over `Scalar`; the harness
/// layer pins f64 (see the aliases at the crate root).
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an f64 constant into the working scalar type.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant must be representable")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_round_trip() {
        assert_eq!(c::<f64>(0.25), 0.25);
        assert_eq!(c::<f32>(0.25), 0.25f32);
    }
}

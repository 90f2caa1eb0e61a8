use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the solvers are generic over (`f32` or `f64`).
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal or computed constant.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Tolerance used when deciding whether an input is "symmetric enough".
    /// 1e-8 for `f64`; widened to a few hundred ulps for narrower types.
    fn symmetry_tol() -> Self {
        let eps = Self::default_epsilon() * Self::lit(256.0);
        let base = Self::lit(1e-8);
        if eps > base {
            eps
        } else {
            base
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

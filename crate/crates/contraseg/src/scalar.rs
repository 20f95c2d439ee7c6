//! Scalar abstraction: every numeric kernel is generic over `f32`/`f64`.

use ndarray::NdFloat;
use num_traits::{FromPrimitive, NumCast};

/// Floating-point element type for tensors, parameters and losses.
///
/// `NdFloat` brings the ndarray arithmetic and linalg bounds; `cast` keeps
/// call sites free of `NumCast` noise.
pub trait Scalar: NdFloat + FromPrimitive {
    /// On-disk dtype name for checkpoint blobs.
    const DTYPE: &'static str;

    fn cast<T: NumCast>(x: T) -> Self {
        NumCast::from(x).expect("value representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

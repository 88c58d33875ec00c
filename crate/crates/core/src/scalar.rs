use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::io::blob::BlobElement;

/// Real scalar type usable for real-mode inference and geometry.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + BlobElement + 'static
{
    /// Lossless-enough conversion from `f64`; used for constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion is total for float scalars")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64 is total")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

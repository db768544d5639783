//! Floating-point scalar abstraction shared by the tensor engine and the model.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by the autodiff engine: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for types that cannot represent finite `f64`s,
    /// which neither implementor does.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

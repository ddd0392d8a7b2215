//! Scalar abstraction used by every numeric routine in the crate.

use ndarray::ScalarOperand;
use num_traits::{FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the models and algorithms are generic over.
///
/// Implemented for `f32` and `f64`. Pipelines pick their precision once and
/// every downstream model inherits it; concrete aliases for the common
/// choices live at the crate root.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert from any primitive number, panicking on unrepresentable input.
    fn cast<T: ToPrimitive>(x: T) -> Self {
        Self::from_f64(x.to_f64().expect("numeric cast")).expect("numeric cast")
    }

    /// Widen to `f64` for reporting and mixed-precision accumulation.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Float for f32 {}
impl Float for f64 {}

//! Scalar element trait for tensor storage.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable as tensor storage: `f32` or `f64`.
///
/// The training pipeline and the checkpoint format run on `f32`; `f64`
/// instantiation is available for oracles and tests that want extra headroom.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant, panicking only for non-finite inputs.
    fn from_f64_val(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Widens to `f64` for mixed-precision accumulation in metrics.
    fn to_f64_val(self) -> f64 {
        self.to_f64().expect("element is representable as f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

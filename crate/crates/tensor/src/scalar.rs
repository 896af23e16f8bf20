use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of every tensor. Implemented for `f64` (the default) and `f32`.
pub trait Scalar: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

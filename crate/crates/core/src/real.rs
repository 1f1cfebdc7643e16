//! Scalar abstraction: the model runs in `f32` for production and `f64` for
//! gradient-check tests. Everything generic over [`Real`] is monomorphized,
//! so the f32 path pays no abstraction cost.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub trait Real:
    Float + num_traits::NumAssign + Sum + Send + Sync + Debug + Default + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline(always)]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline(always)]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

//! Floating-point abstraction so the same model code runs in 32-bit
//! (training/inference default) and 64-bit (gradient checking) mode.

use num_traits::Float;

pub trait Real:
    Float + num_traits::NumCast + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const WIDTH: &'static str;

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 converts to Real")
    }

    fn to_f64(self) -> f64 {
        num_traits::cast(self).expect("Real converts to f64")
    }
}

impl Real for f32 {
    const WIDTH: &'static str = "f32";
}

impl Real for f64 {
    const WIDTH: &'static str = "f64";
}

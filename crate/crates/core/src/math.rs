//! Float math routed through `libm` so the crate builds without `std` and
//! seeded runs produce the same bits on every platform.

pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub(crate) fn log2(x: f64) -> f64 {
    libm::log2(x)
}

pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub(crate) fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub(crate) fn floor(x: f64) -> f64 {
    libm::floor(x)
}

//! Reference computations written without the `lesionseg` crate: central
//! finite differences and an exhaustive pixel/component counting metric.
//! Everything here favours obviousness over speed.

pub mod finite_difference;
pub mod metrics;

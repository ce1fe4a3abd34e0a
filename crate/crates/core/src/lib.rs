pub mod analysis;
pub mod api;
pub mod config;
pub mod data;
pub mod deficits;
pub mod error;
pub mod experiments;
pub mod fisher;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// Reads an `f64` that JSON may carry as `null` when it was not finite.
pub(crate) fn f64_or_nan<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<f64, D::Error> {
    use serde::Deserialize;
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

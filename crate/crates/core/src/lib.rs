// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dataio;
pub mod error;
pub mod factorize;
pub mod ica;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod recovery;

pub use error::{Error, Result};

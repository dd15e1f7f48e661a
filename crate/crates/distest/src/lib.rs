// `!(x > 0.0)` is how NaN is rejected alongside out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// quadrature and rational-approximation constants are kept as published
#![allow(clippy::excessive_precision)]

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod model;
pub mod quantizer;
pub mod channel;
pub mod fim;
pub mod wwb;
pub mod estimator;
pub mod powalloc;
pub mod mcsim;

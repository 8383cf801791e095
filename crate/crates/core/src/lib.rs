// Negated float comparisons are deliberate throughout: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernel;
pub mod quadrature;

pub use error::{Error, Result};
pub mod affinity;
pub mod calibrate;
pub mod continuum;
pub mod descent;
pub mod io;
pub mod measure;
pub mod study;

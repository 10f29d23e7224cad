//! Spatial prediction toolkit: seven predictors behind one fit/predict
//! interface, plus the metrics used to compare them on a hold-out split.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod data;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod par;
pub mod predictors;

pub use error::{Result, SpbError};

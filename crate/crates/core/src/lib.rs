// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamform;
pub mod channel;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flcore;
pub mod harness;
pub mod modem;
pub mod par;
pub mod predictor;
pub mod rng;

pub use error::{Error, Result};

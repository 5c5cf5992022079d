// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod imitation;
pub mod qlearn;
pub mod rnn;
pub mod rsu;
pub mod world;

pub use error::{Error, Result};

// `!(x > 0.0)` style checks deliberately reject NaN along with bad values;
// numeric kernels index several buffers in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ablation;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod prompt;
pub mod render;
pub mod sds;
pub mod separation;
pub mod signal;

pub use error::{Error, Result};

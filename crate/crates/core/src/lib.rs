// `!(x > 0.0)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric kernels index several parallel buffers with one counter.
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod captioner;
pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod features;
pub mod foa;
pub mod geom;
pub mod imgproc;
pub mod io;
pub mod kgraph;
pub mod metrics;
pub mod pipeline;
pub mod skeleton;
pub mod textkw;

pub use error::{Error, Result};

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod conic;
pub mod error;
pub mod figure1;
pub mod grid;
pub mod linalg;
pub mod matpower;
pub mod montecarlo;
pub mod opf;
pub mod shift;
pub mod stochastic;
pub mod synthetic;

pub use error::{Error, Result};

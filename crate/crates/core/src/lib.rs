#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]
pub mod certify;
pub mod error;
pub mod exec;
pub mod io;
pub mod lipschitz;
pub mod models;
pub mod norms;
pub mod pipeline;
pub mod poisson;
mod pwl;
pub mod sampling;
mod simplex;
pub mod statespace;
pub mod tolerance;

pub use error::{Error, Result};

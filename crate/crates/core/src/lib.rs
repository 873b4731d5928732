//! Slow-fast multivalued McKean-Vlasov systems: resolvent-Euler particle
//! simulation, averaging and large-deviation rate computations.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod error;
pub mod harness;
pub mod ldp;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod monotone_ops;
pub mod rng;
pub mod sde_engine;

pub use error::{Error, Result};

//! Desk-scale simulator for model collapse in self-consuming generative
//! training.
//!
//! The crate covers three tracks:
//!
//! * linear denoising autoencoders fitted in a self-consuming loop, with the
//!   collapse bound and the real-data floor as executable checks ([`dae`]);
//! * rectified-flow velocity fields, integrators and training ([`field`],
//!   [`dynamics`]);
//! * vanilla, real-data augmented, online and stochastic reflow
//!   ([`reflow`]), evaluated with the tools in [`metrics`].
//!
//! [`experiment`] wires everything into config-driven runs that emit CSV.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dae;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod field;
pub mod metrics;
pub mod numerics;
pub mod reflow;

pub use error::{Error, Result};
pub use numerics::Matrix;

/// Code version recorded in run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

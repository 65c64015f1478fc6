//! Codec-latent speech bandwidth extension.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`numerics`]) on top of which the audio codec, the structure-constrained
//! residual vector quantizer ([`scrvq`]), the U-Conformer velocity network
//! ([`velocity_net`]) and the conditional flow converter ([`flow`]) are built.
//! [`pipeline`] ties everything together: synthetic data generation, the
//! three training stages, checkpoints and end-to-end inference.

pub mod codec;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod scrvq;
pub mod velocity_net;
pub mod voicing;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tape, Tensor, Val};

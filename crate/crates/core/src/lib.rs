//! Over-the-air federated edge learning with integrated sensing at a
//! multi-antenna parameter server.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: small dense complex linear algebra and RNG streams
//! - [`channel`]: system configuration, geometry, fading and the target response
//! - [`sensing`]: effective noise, whitening, ML estimation of the target response, CRB
//! - [`aggregation`]: zero-forcing coordination, SIC and the aggregation-error closed form
//! - [`scheduler`]: the precoder / receiver marginal problems and matching-pursuit scheduling
//! - [`fedlearn`]: desk-scale federated logistic regression over the simulated air interface
//! - [`harness`]: config files, Monte-Carlo sweeps and CSV output

#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod channel;
pub mod error;
pub mod fedlearn;
pub mod harness;
pub mod numerics;
pub mod scheduler;
pub mod sensing;

pub use error::{Error, Result};

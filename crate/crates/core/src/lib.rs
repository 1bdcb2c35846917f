//! System-status-aware adaptive inference control.
//!
//! A small policy network picks, frame by frame, the input resolution and exit
//! depth of a dynamic video model so that accuracy stays high while the
//! per-frame delay stays under a tolerance, even as background processes
//! compete for the device. An auxiliary delay-prediction head gives a
//! label-free signal for adapting the policy to unseen devices, and a
//! first-order meta-update shapes the shared trunk so that this adaptation
//! transfers.
//!
//! The video model itself is replaced by a surrogate ([`stream`]), and
//! devices by a parametric delay model ([`device`]) with an optional measured
//! backend ([`kernel`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod config;
pub mod device;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod status;
pub mod stream;
pub mod training;

pub use error::{Error, Result};

//! Newton-Raphson power flow with three ways of choosing the initial guess:
//! an analytical basin-of-attraction estimate, learned initializers, and a
//! reinforcement-learning agent that moves a guess toward fast convergence.

// `!(x > 0.0)` is used on purpose so that NaN settings are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basin;
pub mod cli;
pub mod error;
pub mod io;
pub mod network;
pub mod neural;
pub mod nr;
pub mod rl;

pub use error::{Error, Result};
pub use network::{GridCase, Line, Phasor, StateVector};

//! Exit probabilities for spectrally negative Levy processes whose position
//! is partially reset (multiplied by a factor p) at independent Poisson
//! epochs.
//!
//! The library has three legs that check each other:
//!
//! * closed-form scale functions and potential-density kernels
//!   ([`scale`], [`kernel`]);
//! * integral-equation solvers that assemble the resetting exit identities
//!   on top of them ([`resolvent`], [`exit`], [`total`], [`conv`]);
//! * a direct Monte Carlo simulator of the resetting dynamics ([`mc`]).

// Numeric idioms kept over lint suggestions: !(x > 0) fails closed on NaN,
// parity tests pick quadrature weights, index loops walk parallel arrays,
// and solver entry points take their full parameter lists.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::manual_is_multiple_of)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod conv;
pub mod error;
pub mod exit;
pub mod total;
pub mod grid;
pub mod kernel;
pub mod mc;
pub mod levy;
pub mod resolvent;
pub mod scale;

pub use error::{PsrError, Result};

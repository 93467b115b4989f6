//! Decentralized entropic optimal transport.
//!
//! Two sample sets are scattered over simulated source and target agents.
//! Agents never exchange raw samples: the Gibbs kernel is approximated from
//! one-bit random-hyperplane sketches plus sample norms ([`sketch`]), and the
//! dual potentials are fitted by mini-batch randomized block-coordinate ascent
//! ([`mrbcd`]) driven by a communication protocol over agent pairs
//! ([`netsim`]). A centralized log-domain Sinkhorn solver ([`eot`]) is the
//! reference, and [`analysis`] measures how far the decentralized answer is
//! from it and why.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod eot;
pub mod error;
pub mod experiment;
pub mod measures;
pub mod mrbcd;
pub mod netsim;
pub mod sketch;

pub use error::{Error, Result};

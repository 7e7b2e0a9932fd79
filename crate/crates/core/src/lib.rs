//! Consensus and flocking for Cucker-Smale type systems whose pairwise
//! communication rates may drop out.
//!
//! The crate is organized bottom-up:
//!
//! | Module | Content |
//! |--------|---------|
//! | [`state`] | ensemble states, the variance bilinear form `B`, standard deviations |
//! | [`graph`] | weight matrices, graph Laplacians, algebraic connectivity |
//! | [`kernel`] | interaction kernels, the rescaled kernel and its primitive |
//! | [`schedule`] | piecewise-constant communication schedules |
//! | [`pe`] | persistence-of-excitation certificates |
//! | [`dynamics`] | first- and second-order integration with monitors |
//! | [`lyapunov`] | strict Lyapunov functionals and their dissipation checks |
//!
//! Agent collections in `(R^d)^N` are stored as `N x d` matrices (one row per
//! agent). Every operator acts on the columns independently.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
mod error;
pub mod graph;
pub mod kernel;
pub mod lyapunov;
pub mod pe;
mod quad;
pub mod schedule;
pub mod state;

pub use error::{Error, Result};

/// `N x d` block of agent vectors, one agent per row.
pub type AgentMatrix = nalgebra::DMatrix<f64>;

//! Numerical toolkit for semilinear wave equations `d_t^2 u - Lap u + F(t, x, u) = 0`
//! on flat domains: forward solvers, Dirichlet-to-Neumann maps, geometric optics
//! probes and recovery of the nonlinear term from boundary measurements.

pub mod error;
pub mod cli;
pub mod field;
pub mod forward;
pub mod geometry;
pub mod linear;
pub mod linearization;
pub mod mollify;
pub mod nonlinearity;
pub mod persist;
pub mod probe;
pub mod recovery;
pub mod smooth;
pub mod sobolev;
pub mod stencil;

pub use error::{Error, Result};

//! Finite element laboratory for mixed Steklov–Robin/Neumann eigenproblems
//! on triangulated planar domains.
//!
//! The boundary is split into a spectral part `S` and a Robin/Neumann part
//! `W`. For each problem variant the crate assembles the pencil `(A, B)` with
//! `A` the energy form and `B` the mass of `S`, solves `A x = λ B x`,
//! differentiates the pencil with respect to domain deformations and
//! coefficient perturbations, and uses those derivatives to split multiple
//! eigenvalues.

// `!(x > 0.0)` guards deliberately reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficient;
pub mod coeffderiv;
pub mod error;
pub mod forms;
pub mod geometry;
pub mod linalg;
pub mod quadrature;
pub mod search;
pub mod shapederiv;
pub mod spectrum;

pub use error::{Error, Result};

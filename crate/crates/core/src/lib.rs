//! Random walks in the plane whose increments are twisted by a fixed rotation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod group;
pub mod processes;
pub mod spectral;
pub mod stats;
pub mod walk;

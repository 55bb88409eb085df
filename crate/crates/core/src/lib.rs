//! Gradient-flow simulator for two-layer ReLU networks on orthogonally
//! separable data, with max-margin oracles and Neural Collapse checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod collapse;
pub mod dataset;
pub mod experiment;
pub mod flow;
pub mod init;
pub mod linalg;
pub mod margins;
pub mod model;

//! Online feedback optimization of PCC flexibility with feasible-region safety checks.

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod controller;
pub mod geometry;
pub mod grid;
pub mod noise;
pub mod power_flow;
pub mod qp;
pub mod region;
pub mod scenario;
pub mod sensitivity;
pub mod stats;
pub mod uncertainty;

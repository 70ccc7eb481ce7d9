//! Certification of power-injection uncertainty sets for distribution grids.
//!
//! A set of PQ-bus injections is *admissible* when every path through it
//! keeps the load-flow solution unique, nonsingular and within security
//! limits. The library proves admissibility with convex infeasibility
//! certificates and offers a sampling oracle for cross-checking.

pub mod chordal;
pub mod conic;
pub mod constraints;
#[doc(hidden)]
pub mod fuzz_entry;
pub mod grid;
pub mod load_flow;
pub mod moment;
pub mod oracle;
pub mod pipeline;
pub mod poly;
pub mod report;
pub mod uncertainty;
pub mod vset;

//! Exact fair division of an infinite stream of time slots.
//!
//! The time line `T = {1, 2, ...}` is partitioned among agents whose
//! preferences are countably additive probability measures with geometric
//! (or finitely perturbed geometric) discounting. Everything is computed in
//! exact rational arithmetic: masses of eventually periodic sets are closed
//! forms, masses of procedurally defined sets are certified rational
//! intervals, and every fairness verdict is either exact or carries its
//! interval evidence.
//!
//! The pieces:
//!
//! - [`numeric`]: arbitrary-precision rationals and certified interval
//!   comparison.
//! - [`schedule`]: eventually periodic sets with exact tail/cycle/boolean
//!   algebra, and lazy schedules for procedure outputs.
//! - [`measure`]: the utility family, exact masses, patience levels, and
//!   monotone reordering.
//! - [`cut`]: the greedy and tripartition cut procedures with their
//!   divisibility bookkeeping.
//! - [`apportion`]: proportional allocation by staged cycle apportionment,
//!   the pick-order lift back to non-monotone economies, and the
//!   round-robin baseline.
//! - [`envy`]: the evaluate/cut query engine, divide-and-choose,
//!   the Selfridge–Conway protocol, and patience-bound arithmetic.
//! - [`certificate`]: machine-checkable fairness verdicts.

pub mod apportion;
pub mod certificate;
pub mod cut;
pub mod envy;
mod error;
pub mod measure;
pub mod numeric;
pub mod schedule;

pub use error::{Error, Result};

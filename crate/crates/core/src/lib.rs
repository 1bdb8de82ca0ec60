//! Class symbolic regression.
//!
//! Searches for one analytic form that fits several datasets at once. Class
//! constants take a single value shared by every dataset; realization-specific
//! ("spe") constants are refitted per dataset. Candidate forms are sampled by a
//! recurrent policy trained with a risk-seeking policy gradient, and recovery
//! is judged over the complexity/accuracy Pareto front.

pub mod bench;
pub mod cli;
pub mod controller;
pub mod equivalence;
pub mod error;
pub mod expr;
pub mod optimizer;
pub mod rng;
pub mod search;
pub mod streams;
pub mod units;

pub use error::{Error, Result};

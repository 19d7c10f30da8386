//! Extremum-increment (EI) training for bias-free sigmoid multilayer perceptrons.
//!
//! Instead of descending a loss, EI makes every training surface a stationary
//! point of every output unit by solving homogeneous linear systems in the
//! weights, then picks a particular solution from the null space whose
//! extrema sit on the correct side of the output range ("polarization").
//!
//! Module map:
//!
//! - [`network`]: architecture, weights, forward traces.
//! - [`calculus`]: analytic input Jacobians and finite-difference oracles.
//! - [`linsys`]: stage systems, monomial bookkeeping and null spaces.
//! - [`polarize`]: termination conditions, particular-solution search and
//!   weight realization.
//! - [`trainer`]: the descending-stage fit loop and read-only probes.
//! - [`reduce`]: neighborhood-based sample reduction.
//! - [`baseline`]: a plain back-propagation foil for comparison reports.
//!
//! Data-parallel loops (search restarts, per-sample assembly, census grids)
//! go through [`Execution`]; with the `parallel` feature disabled every path
//! runs sequentially and produces identical results.

pub mod baseline;
pub mod calculus;
mod error;
mod exec;
pub mod linsys;
pub mod network;
pub mod polarize;
pub mod reduce;
pub mod report;
mod svd;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use network::{forward, sigmoid, ActivationTrace, Dataset, NetSpec, Sample, WeightSet};
pub use polarize::{check_condition, SearchBudget, TerminationMode};
pub use report::TrainReport;
pub use trainer::{fit, TrainConfig};

//! Online recalibration of black-box probability forecasts.
//!
//! A forecaster observes an oracle's prediction `q_t`, announces a grid
//! probability `p_t ∈ {0, 1/m, …, 1}` and then sees the binary label. The
//! [`recalibrator`] drives the forecaster's average vector payoff (a
//! calibration block plus a regret coordinate) towards a small target set
//! using a halfspace oracle and online gradient descent over the dual box.
//! [`mw_recalibrator`] is the multiplicative-weights baseline over the
//! exponentially lifted objective, evaluated implicitly.
//!
//! The [`harness`] module wires oracles, label streams and forecasters into
//! reproducible experiments; [`verify`] bundles the property checks exposed
//! by the `recal verify` command.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod mw_recalibrator;
pub mod parallel;
pub mod recalibrator;
pub mod scoring;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{GameConfig, HalfspaceParam, PayoffVector};
pub use metrics::BucketStats;
pub use recalibrator::{ForecastDistribution, RecalibratorState};
pub use scoring::{Label, ScoringRule};

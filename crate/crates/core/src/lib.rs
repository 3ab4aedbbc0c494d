//! Fluid-flow TCP/AQM laboratory.
//!
//! The crate bundles everything needed to go from a network description to a
//! regulated router queue:
//!
//! * [`model`]: the nonlinear fluid model's equilibrium, its linearization as a
//!   time-delay system, integral augmentation and the disturbance-to-queue
//!   transfer function.
//! * [`delay_lmi`]: a delay-dependent Lyapunov-Krasovskii stability test with a
//!   discretized functional, delay-margin bisection and a spectral
//!   characteristic-root oracle.
//! * [`synthesis`]: state-feedback gain design through the slack-variable
//!   bilinear condition, with certificates that are re-validated before they
//!   are returned.
//! * [`controllers`]: state feedback, integral state feedback, PI and RED drop
//!   probability laws plus the aggregate-rate window estimator.
//! * [`sim`]: delay differential equation integration of the nonlinear and
//!   linear models, cross-traffic injection and per-period queue statistics.
//! * [`scenario`]: the on-disk scenario and certificate documents.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controllers;
pub mod delay_lmi;
mod error;
pub mod linalg;
pub mod model;
pub mod scenario;
pub mod sim;
pub mod synthesis;

pub use controllers::{AqmConfig, AqmKind, AqmState, PiParams, RedParams};
pub use delay_lmi::{
    analysis_feasible, max_stable_delay, rightmost_root, LkParams, MarginReport, SearchOptions,
    StabilityCertificate, Verdict,
};
pub use error::{Error, Result};
pub use model::{NetworkParams, OperatingPoint, TdsSystem};
pub use sim::{Scenario, Segment, StatsReport, Trace};
pub use synthesis::{Gains, GainFlavor, SynthesisCertificate, SynthesisOptions};

//! Certificate-guided pruning (CGP) for noisy Lipschitz black-box maximization.
//!
//! CGP maintains an explicit *active set* `A_t = {x : U_t(x) >= l_t}`, where
//! `U_t` is a confidence-adjusted Lipschitz upper envelope over the samples and
//! `l_t` is the best lower confidence bound observed so far. Everything outside
//! `A_t` is certifiably suboptimal with high probability, so the set doubles as
//! an exportable optimality certificate and as a measurable progress signal
//! (its volume shrinks as sampling proceeds).
//!
//! The crate provides:
//!
//! * [`cgp::cgp_run`] — the core loop with a known Lipschitz constant,
//!   coverage-penalized acquisition and confidence-radius replication;
//! * [`adaptive::adaptive_run`] — online Lipschitz learning by
//!   violation-triggered doubling;
//! * [`trust_region::tr_run`] — multiple trust regions with local
//!   certificates and certified restarts, for high dimensions;
//! * [`hybrid::hybrid_run`] — smoothness-ratio detection with an optional
//!   switch to Gaussian-process refinement inside the frozen active set;
//! * [`volume`] — exact grid volume for low dimensions and a nested-set
//!   (subset simulation) estimator with hit-and-run sampling for high ones;
//! * [`bench`] / [`experiment`] — synthetic benchmarks, Sobol and GP-UCB
//!   baselines, and a seeded, reproducible experiment runner.
//!
//! All randomness flows from one root seed through fixed labeled streams, so a
//! `(config, seed)` pair reproduces trace and result files byte for byte.

pub mod adaptive;
pub mod bench;
pub mod certificate;
pub mod cgp;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod hybrid;
pub mod model;
pub mod optimize;
pub mod rng;
pub mod sobol;
pub mod trust_region;
pub mod volume;

pub use crate::certificate::{CertificateSnapshot, GapReport};
pub use crate::cgp::{cgp_run, CgpState, RunResult, StopReason};
pub use crate::error::{CgpError, Result};
pub use crate::model::{Mode, NoisyObjective, Point, RunConfig, SampleStore, StoppingRule};
pub use crate::volume::ActiveSetEstimate;

//! Sampling toolkit for unnormalized, highly multimodal target densities.
//!
//! The pipeline has two phases. An annealed unadjusted-Langevin particle
//! system walks a geometric path from a standard Gaussian to the target while
//! accumulating importance weights (either nonequilibrium path weights or
//! marginal weights from a forward-density estimate), with resampling when the
//! effective sample size drops. The weighted particles then drive a
//! probability-flow ODE that transports fresh Gaussian draws to the target via
//! a kernel-weighted velocity estimate. Baseline samplers (single-chain HMC
//! and a per-step Monte Carlo ODE) and a set of two-sample / goodness-of-fit
//! metrics support side-by-side comparisons.

pub mod almc;
pub mod baselines;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod interpolant;
pub mod metrics;
mod parallel;
pub mod rng;
pub mod target;

pub use ensemble::{Ensemble, ResampleMethod};
pub use error::{Error, Result};
pub use interpolant::InterpolantSchedule;
pub use target::{AllenCahn1D, GaussianMixture, TargetModel};

//! Posterior sampling reinforcement learning with Gaussian-process dynamics
//! priors.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernels`]: stationary covariance functions and their spectral measures.
//! - [`gp`]: exact GP posteriors and random-feature function samples.
//! - [`mdp`]: the navigation environment and the episodic interaction protocol.
//! - [`planner`]: grid value iteration and policy evaluation.
//! - [`psrl`]: the posterior-sampling loop and regret bookkeeping.
//! - [`analysis`]: information gain, rate fits and concentration checks.

pub mod analysis;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod mdp;
pub mod planner;
pub mod psrl;

pub use error::{Error, Result};
pub use gp::{Dataset, FeatureMap, FiniteGpSampler, FunctionSample, GpPosterior, RffModel};
pub use kernels::{Kernel, KernelFamily, Smoothness};
pub use mdp::{MdpConfig, MdpInstance, NavigationReward, Trajectory};
pub use planner::{Grid, GridPolicy, GridSpec, TransitionMode};
pub use psrl::{run_psrl, AgentKind, RegretCurve, RunConfig, SeedRun};

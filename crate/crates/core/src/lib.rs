//! A laboratory for group-relative policy optimization on token-sequence
//! MDPs small enough to enumerate exactly.
//!
//! A tabular softmax policy generates sequences of tokens from a fixed
//! vocabulary up to a horizon (or an end-of-sequence token). Rewards are
//! terminal. Because the trajectory space is enumerable, `J(θ)` and its
//! gradient are available exactly, which makes it possible to check
//! Monte Carlo estimators against ground truth:
//!
//! * [`objectives`] holds the token-level (GRPO), trajectory-level
//!   (TIC-GRPO) and no-importance-sampling estimators together with their
//!   additive error decompositions;
//! * [`trainer`] runs the outer/inner loop;
//! * [`oracle`] computes exact gradients, bias studies, smoothness probes
//!   and convergence sweeps;
//! * [`experiments`] wraps the four experiment recipes behind a config
//!   file.

pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod group;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod stats;
pub mod trainer;
pub mod trajectory;

pub use env::{enumerate, Reward, RewardSpec, TrajectorySpace, DEFAULT_ENUMERATION_BUDGET};
pub use error::{LabError, Result};
pub use group::{group_population_stats, normalize_rewards, sample_group, Group, PopulationStats};
pub use objectives::{
    ablation_gradient, clip, clip_bar, decompose_grpo, decompose_tic, estimate_gradient, grpo_gradient,
    surrogate_objective, tic_gradient, token_ratio, traj_ratio, ClipConfig, ClipMode, DecompositionReport,
    EstimatorSpec, GradientEstimate, KlEstimator, LengthNorm, RatioMode,
};
pub use oracle::{exact_j_and_grad, ExactGradients};
pub use policy::{Layout, PolicyParams, ReferencePolicy, State, TokenId, Vocab};
pub use trainer::{run, Algorithm, RunLog, Task, TrainConfig, TrainError};
pub use trajectory::{sample_trajectory, Sequence, Trajectory};

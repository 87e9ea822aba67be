//! The outer/inner optimization loop.
//!
//! Each outer step freezes `θ_old ← θ`, samples a batch of groups under
//! `θ_old` once, and then applies `K` plain gradient-ascent updates
//! `θ ← θ + η·ĝ`, each on one mini-batch of the frozen batch.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Reward, TrajectorySpace};
use crate::error::LabError;
use crate::group::{sample_group, Group, DEFAULT_DELTA};
use crate::objectives::{estimate_gradient, ClipConfig, EstimatorSpec, KlEstimator, LengthNorm};
use crate::oracle::{exact_j, exact_over_prompts};
use crate::policy::{Layout, PolicyParams, ReferencePolicy};
use crate::stats::{norm, norm_sq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Grpo,
    TicGrpo,
    Ablation,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Grpo, Algorithm::TicGrpo, Algorithm::Ablation];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "grpo",
            Algorithm::TicGrpo => "tic-grpo",
            Algorithm::Ablation => "ablation",
        }
    }

    /// Clipping used when the config leaves it unset.
    pub fn default_clip(self) -> ClipConfig {
        match self {
            Algorithm::Grpo => ClipConfig::two_sided(0.2, 0.28),
            Algorithm::TicGrpo => ClipConfig::upper_only(0.28),
            Algorithm::Ablation => ClipConfig::disabled(),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, LabError> {
        match s {
            "grpo" => Ok(Algorithm::Grpo),
            "tic-grpo" => Ok(Algorithm::TicGrpo),
            "ablation" => Ok(Algorithm::Ablation),
            other => Err(LabError::config("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How the `K` inner mini-batches are drawn from the outer batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reuse {
    /// The batch is split into `K` disjoint consecutive mini-batches.
    #[default]
    Partition,
    /// Each inner step draws its mini-batch uniformly with replacement.
    WithReplacement,
}

fn default_algorithm() -> Algorithm {
    Algorithm::TicGrpo
}
fn default_eta() -> f64 {
    0.05
}
fn default_k() -> usize {
    4
}
fn default_n() -> usize {
    300
}
fn default_group_size() -> usize {
    8
}
fn default_minibatch() -> usize {
    1
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Inner iterations per outer step.
    #[serde(rename = "K", default = "default_k")]
    pub inner_steps: usize,
    /// Outer iterations.
    #[serde(rename = "N", default = "default_n")]
    pub outer_steps: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Groups sampled per outer step; defaults to `minibatch_groups · K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_groups: Option<usize>,
    #[serde(default = "default_minibatch")]
    pub minibatch_groups: usize,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Defaults to the algorithm's clip (see [`Algorithm::default_clip`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipConfig>,
    #[serde(default)]
    pub length_norm: LengthNorm,
    #[serde(default)]
    pub kl_estimator: KlEstimator,
    #[serde(default)]
    pub reuse: Reuse,
    #[serde(default)]
    pub seed: u64,
    /// Log the exact `J` after every update and `‖∇𝒥‖²` at every refresh.
    #[serde(default = "default_true")]
    pub log_exact: bool,
}

impl TrainConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        TrainConfig {
            algorithm,
            eta: default_eta(),
            inner_steps: default_k(),
            outer_steps: default_n(),
            group_size: default_group_size(),
            batch_groups: None,
            minibatch_groups: default_minibatch(),
            beta: 0.0,
            delta: default_delta(),
            clip: None,
            length_norm: LengthNorm::default(),
            kl_estimator: KlEstimator::default(),
            reuse: Reuse::default(),
            seed: 0,
            log_exact: true,
        }
    }

    pub fn batch_groups(&self) -> usize {
        self.batch_groups.unwrap_or(self.minibatch_groups * self.inner_steps)
    }

    pub fn clip(&self) -> ClipConfig {
        self.clip.unwrap_or_else(|| self.algorithm.default_clip())
    }

    pub fn estimator(&self) -> EstimatorSpec {
        let base = match self.algorithm {
            Algorithm::Grpo => EstimatorSpec::grpo(self.clip()),
            Algorithm::TicGrpo => EstimatorSpec::tic(self.clip()),
            Algorithm::Ablation => EstimatorSpec::ablation(),
        };
        base.with_beta(self.beta)
            .with_length_norm(self.length_norm)
            .with_kl(self.kl_estimator)
    }

    /// Fills every optional field with its effective value.
    pub fn resolved(&self) -> Self {
        TrainConfig {
            batch_groups: Some(self.batch_groups()),
            clip: Some(self.clip()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.inner_steps == 0 {
            return Err(LabError::config("train.K", "K must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(LabError::config("train.eta", "must be finite and non-negative"));
        }
        if self.group_size < 2 {
            return Err(LabError::config("train.group_size", "must be at least 2"));
        }
        if self.minibatch_groups == 0 {
            return Err(LabError::config("train.minibatch_groups", "must be at least 1"));
        }
        let batch = self.batch_groups();
        match self.reuse {
            Reuse::Partition if batch != self.minibatch_groups * self.inner_steps => {
                return Err(LabError::config(
                    "train.batch_groups",
                    format!(
                        "partition reuse needs batch_groups = minibatch_groups × K = {}, got {batch}",
                        self.minibatch_groups * self.inner_steps
                    ),
                ));
            }
            Reuse::WithReplacement if batch == 0 => {
                return Err(LabError::config("train.batch_groups", "must be at least 1"));
            }
            _ => {}
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(LabError::config("train.beta", "must be finite and non-negative"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(LabError::config("train.delta", "must be finite and non-negative"));
        }
        self.clip().validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(default_algorithm())
    }
}

/// A task: a layout, its reward, and (optionally) the enumerated spaces of
/// every prompt for exact logging.
#[derive(Debug, Clone)]
pub struct Task {
    pub layout: Arc<Layout>,
    pub reward: Reward,
    pub spaces: Option<Vec<TrajectorySpace>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub n: usize,
    pub k: usize,
    /// Exact `J` after the update.
    pub j_exact: Option<f64>,
    /// Mean reward of the outer batch, an estimate of `J(θ_old)`.
    pub j_mc: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    /// Seconds since the start of the run; not reproducible.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub n: usize,
    /// `J(θ_{n,0})`.
    pub j: f64,
    /// `‖∇𝒥(θ_{n,0})‖²`.
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub n: usize,
    pub k: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub inner: Vec<InnerRecord>,
    pub outer: Vec<OuterRecord>,
    /// Final parameters, or the last finite ones after an abort.
    pub final_params: PolicyParams,
    pub final_j: Option<f64>,
    pub abort: Option<AbortRecord>,
}

impl RunLog {
    /// Mean of `‖∇𝒥(θ_{n,0})‖²` over outer steps `n ≥ skip`.
    pub fn grad_norm_statistic(&self, skip: usize) -> Option<f64> {
        let tail: Vec<f64> = self.outer.iter().skip(skip).map(|r| r.grad_norm_sq).collect();
        if tail.is_empty() {
            None
        } else {
            Some(tail.iter().sum::<f64>() / tail.len() as f64)
        }
    }

    /// The `J` trajectory used for trend checks: `J(θ_{n,0})` for every
    /// outer step followed by the final `J`.
    pub fn j_series(&self) -> Vec<f64> {
        self.outer.iter().map(|r| r.j).chain(self.final_j).collect()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("non-finite parameters at outer step {n}, inner step {k}")]
    NumericAbort { n: usize, k: usize, log: Box<RunLog> },
}

/// Parameters and the frozen batch of one outer step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub theta: PolicyParams,
    pub theta_old: PolicyParams,
    pub groups: Vec<Group>,
}

impl TrainState {
    pub fn new(theta: PolicyParams) -> Self {
        TrainState {
            theta_old: theta.clone(),
            theta,
            groups: Vec::new(),
        }
    }
}

/// `θ_old ← θ`; the previous batch is discarded.
pub fn refresh_old(state: TrainState) -> TrainState {
    TrainState {
        theta_old: state.theta.clone(),
        theta: state.theta,
        groups: Vec::new(),
    }
}

/// Independent stream for group `g` of outer step `n`.
fn group_rng(seed: u64, n: usize, g: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((n * batch + g) as u64);
    rng
}

/// Stream for mini-batch selection in outer step `n`.
pub fn selection_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(n as u64);
    rng
}

/// Samples the outer batch under `θ_old`, prompts assigned round-robin.
pub fn sample_batch(
    cfg: &TrainConfig,
    task: &Task,
    theta_old: &PolicyParams,
    n: usize,
) -> Result<Vec<Group>, LabError> {
    let batch = cfg.batch_groups();
    let prompts = task.layout.prompts();
    (0..batch)
        .map(|g| {
            let mut rng = group_rng(cfg.seed, n, g, batch);
            let prompt = (n * batch + g) % prompts;
            sample_group(theta_old, prompt, cfg.group_size, &task.reward, cfg.delta, &mut rng)
        })
        .collect()
}

/// Indices into the outer batch used by inner step `k`.
pub fn minibatch_indices(cfg: &TrainConfig, k: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let m = cfg.minibatch_groups;
    match cfg.reuse {
        Reuse::Partition => (k * m..(k + 1) * m).collect(),
        Reuse::WithReplacement => (0..m).map(|_| rng.random_range(0..batch)).collect(),
    }
}

pub fn run(
    cfg: &TrainConfig,
    task: &Task,
    init: PolicyParams,
    reference: &ReferencePolicy,
) -> Result<RunLog, TrainError> {
    cfg.validate()?;
    if !Arc::ptr_eq(init.layout(), &task.layout) && **init.layout() != *task.layout {
        return Err(LabError::config("init", "initial parameters use a different layout").into());
    }
    let spaces = if cfg.log_exact {
        Some(task.spaces.as_ref().ok_or_else(|| {
            LabError::config(
                "train.log_exact",
                "exact logging needs the enumerated trajectory spaces",
            )
        })?)
    } else {
        None
    };
    let spec = cfg.estimator();
    let start = Instant::now();
    let mut log = RunLog {
        inner: Vec::with_capacity(cfg.outer_steps * cfg.inner_steps),
        outer: Vec::with_capacity(cfg.outer_steps),
        final_params: init.clone(),
        final_j: None,
        abort: None,
    };
    let mut state = TrainState::new(init);

    for n in 0..cfg.outer_steps {
        state = refresh_old(state);
        if let Some(spaces) = spaces {
            let exact = exact_over_prompts(&state.theta, spaces, &task.reward, cfg.beta, reference);
            log.outer.push(OuterRecord {
                n,
                j: exact.j,
                grad_norm_sq: norm_sq(&exact.grad_j_kl),
            });
        }
        state.groups = sample_batch(cfg, task, &state.theta_old, n)?;
        let j_mc = {
            let total: f64 = state.groups.iter().flat_map(|g| g.rewards()).sum();
            total / (state.groups.len() * cfg.group_size) as f64
        };
        let mut select = selection_rng(cfg.seed, n);
        for k in 0..cfg.inner_steps {
            let idx = minibatch_indices(cfg, k, state.groups.len(), &mut select);
            let mini: Vec<Group> = idx.iter().map(|&i| state.groups[i].clone()).collect();
            let est = estimate_gradient(&state.theta, &state.theta_old, &mini, &spec, reference)?;
            let mut next = state.theta.clone();
            next.add_scaled(cfg.eta, &est.vector);
            if !next.is_finite() {
                log.final_params = state.theta.clone();
                log.final_j = spaces.map(|s| exact_j(&state.theta, s, &task.reward));
                log.abort = Some(AbortRecord {
                    n,
                    k,
                    message: "parameters became non-finite after the update".into(),
                });
                return Err(TrainError::NumericAbort {
                    n,
                    k,
                    log: Box::new(log),
                });
            }
            state.theta = next;
            log.inner.push(InnerRecord {
                n,
                k,
                j_exact: spaces.map(|s| exact_j(&state.theta, s, &task.reward)),
                j_mc,
                grad_norm: norm(&est.vector),
                clip_fraction: est.diagnostics.clip_fraction,
                mean_ratio: est.diagnostics.mean_ratio,
                max_ratio: est.diagnostics.max_ratio,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    log.final_j = spaces.map(|s| exact_j(&state.theta, s, &task.reward));
    log.final_params = state.theta;
    Ok(log)
}

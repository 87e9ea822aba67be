//! Surrogate objectives and their gradient estimators.
//!
//! Three estimators share one group of old-policy samples:
//!
//! * token-level (GRPO): per step, `min{w·A, clip(w)·A}` with
//!   `w = π_θ(a_t|s_t) / π_old(a_t|s_t)`;
//! * trajectory-level (TIC-GRPO): per trajectory, `clip_bar(w′)·A` with
//!   `w′ = P_θ(s_T) / P_old(s_T)`;
//! * no importance sampling (ablation): the score at `θ_old` times `A`.
//!
//! Each trajectory `i` is weighted by `c_i`, either `1/(|G|·|s_T^{(i)}|)`
//! (per-trajectory mean) or `1/Σ_j |s_T^{(j)}|` (global token sum). A step
//! whose ratio sits on the constant branch of the clipped surrogate
//! contributes no gradient; a ratio exactly on the boundary counts as
//! unclipped.
//!
//! The decompositions split the gradient term into a leading unbiased part
//! scaled by `κ/σ̄_G`, where `κ = E[1/|s_T|]` (per-trajectory mean) or
//! `1/E[|s_T|]` (global sum), plus error terms that sum back to the
//! estimator exactly.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::group::{Group, PopulationStats};
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::stats::{axpy, norm};
use crate::trajectory::{step_logprobs, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    /// `min{x·A, clip(x)·A}`: upper bound for `A ≥ 0`, lower bound for `A < 0`.
    TwoSided,
    /// `min{x, 1 + ε_high}·A` whatever the sign of `A`.
    UpperOnly,
    /// Ratios are never clipped.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn two_sided(eps_low: f64, eps_high: f64) -> Self {
        ClipConfig {
            eps_low,
            eps_high,
            mode: ClipMode::TwoSided,
        }
    }

    pub fn upper_only(eps_high: f64) -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high,
            mode: ClipMode::UpperOnly,
        }
    }

    pub fn disabled() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            mode: ClipMode::Disabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low >= 0.0 && self.eps_low.is_finite()) {
            return Err(LabError::config("clip.eps_low", "must be finite and >= 0"));
        }
        if self.eps_high.is_nan() || self.eps_high < 0.0 {
            return Err(LabError::config("clip.eps_high", "must be >= 0"));
        }
        Ok(())
    }

    /// Whether the gradient of the clipped surrogate passes through at
    /// ratio `x` with advantage `a` (events `B = B⁺ ∪ B⁻` and `D`).
    pub fn is_active(&self, x: f64, a: f64) -> bool {
        match self.mode {
            ClipMode::Disabled => true,
            ClipMode::UpperOnly => x <= 1.0 + self.eps_high,
            ClipMode::TwoSided => {
                if a >= 0.0 {
                    x <= 1.0 + self.eps_high
                } else {
                    x >= 1.0 - self.eps_low
                }
            }
        }
    }

    /// Surrogate value for ratio `x` and advantage `a`.
    pub fn surrogate(&self, x: f64, a: f64) -> f64 {
        match self.mode {
            ClipMode::Disabled => x * a,
            ClipMode::UpperOnly => clip_bar(x, self) * a,
            ClipMode::TwoSided => (x * a).min(clip(x, self) * a),
        }
    }
}

/// `1−ε_low` below the band, identity inside, `1+ε_high` above.
pub fn clip(x: f64, cfg: &ClipConfig) -> f64 {
    if cfg.mode == ClipMode::Disabled {
        return x;
    }
    if x < 1.0 - cfg.eps_low {
        1.0 - cfg.eps_low
    } else if x > 1.0 + cfg.eps_high {
        1.0 + cfg.eps_high
    } else {
        x
    }
}

/// `min{x, clip(x)} = min{x, 1+ε_high}`; the lower bound never binds.
pub fn clip_bar(x: f64, cfg: &ClipConfig) -> f64 {
    if cfg.mode == ClipMode::Disabled {
        return x;
    }
    x.min(1.0 + cfg.eps_high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    Token,
    Trajectory,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNorm {
    /// `(1/|G|) Σ_i (1/|s_T^{(i)}|) Σ_t`.
    #[default]
    PerTrajectory,
    /// `(1/Σ_i |s_T^{(i)}|) Σ_i Σ_t`.
    GlobalSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    /// Exact categorical KL at every visited state.
    #[default]
    Exact,
    /// Sampled `ρ − log ρ − 1` with `ρ = π_ref(a_t|s_t)/π_θ(a_t|s_t)`.
    K3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub ratio: RatioMode,
    pub clip: ClipConfig,
    pub length_norm: LengthNorm,
    pub beta: f64,
    pub kl: KlEstimator,
}

impl EstimatorSpec {
    pub fn grpo(clip: ClipConfig) -> Self {
        EstimatorSpec {
            ratio: RatioMode::Token,
            clip,
            length_norm: LengthNorm::PerTrajectory,
            beta: 0.0,
            kl: KlEstimator::Exact,
        }
    }

    pub fn tic(clip: ClipConfig) -> Self {
        EstimatorSpec {
            ratio: RatioMode::Trajectory,
            ..EstimatorSpec::grpo(clip)
        }
    }

    pub fn ablation() -> Self {
        EstimatorSpec {
            ratio: RatioMode::None,
            ..EstimatorSpec::grpo(ClipConfig::disabled())
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_length_norm(mut self, norm: LengthNorm) -> Self {
        self.length_norm = norm;
        self
    }

    pub fn with_kl(mut self, kl: KlEstimator) -> Self {
        self.kl = kl;
        self
    }

    /// The ablation never clips.
    pub fn effective_clip(&self) -> ClipConfig {
        match self.ratio {
            RatioMode::None => ClipConfig::disabled(),
            _ => self.clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fraction of clipping units (token steps for GRPO, trajectories for
    /// TIC) whose ratio lies outside the active event.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    pub estimator: EstimatorSpec,
    pub diagnostics: Diagnostics,
}

/// `π_θ(a_t|s_t) / π_old(a_t|s_t)` at step `t`.
pub fn token_ratio(theta: &PolicyParams, theta_old: &PolicyParams, seq: &Sequence, t: usize) -> Result<f64> {
    let (row, tok) = seq
        .steps()
        .nth(t)
        .ok_or_else(|| LabError::domain(format!("step {t} outside trajectory of length {}", seq.len())))?;
    Ok((theta.row_log_prob(row, tok) - theta_old.row_log_prob(row, tok)).exp())
}

/// `P_θ(s_T|s_0) / P_old(s_T|s_0)`.
pub fn traj_ratio(theta: &PolicyParams, theta_old: &PolicyParams, seq: &Sequence) -> f64 {
    let lp: f64 = step_logprobs(theta, seq).iter().sum();
    let lp_old: f64 = step_logprobs(theta_old, seq).iter().sum();
    (lp - lp_old).exp()
}

/// Per-trajectory weights `c_i`.
pub fn length_weights(group: &Group, norm: LengthNorm) -> Vec<f64> {
    let g = group.size() as f64;
    match norm {
        LengthNorm::PerTrajectory => group
            .trajectories()
            .iter()
            .map(|t| 1.0 / (g * t.len() as f64))
            .collect(),
        LengthNorm::GlobalSum => {
            let total = group.total_len() as f64;
            vec![1.0 / total; group.size()]
        }
    }
}

#[derive(Default)]
struct RatioTally {
    units: usize,
    clipped: usize,
    sum: f64,
    max: f64,
}

impl RatioTally {
    fn record(&mut self, x: f64, active: bool) {
        self.units += 1;
        self.sum += x;
        self.max = self.max.max(x);
        if !active {
            self.clipped += 1;
        }
    }

    fn finish(&self) -> Diagnostics {
        let n = self.units.max(1) as f64;
        Diagnostics {
            clip_fraction: self.clipped as f64 / n,
            mean_ratio: self.sum / n,
            max_ratio: self.max,
        }
    }
}

fn add_penalty_grad(
    theta: &PolicyParams,
    reference: &ReferencePolicy,
    spec: &EstimatorSpec,
    row: usize,
    tok: usize,
    coef: f64,
    grad: &mut [f64],
) {
    if spec.beta == 0.0 {
        return;
    }
    match spec.kl {
        KlEstimator::Exact => theta.add_row_kl_grad(reference, row, -spec.beta * coef, grad),
        KlEstimator::K3 => {
            let rho = (reference.params().row_log_prob(row, tok) - theta.row_log_prob(row, tok)).exp();
            // ∇(ρ − log ρ − 1) = (1 − ρ) ∇log π_θ(a_t|s_t)
            theta.add_row_score(row, tok, -spec.beta * coef * (1.0 - rho), grad);
        }
    }
}

fn penalty_value(
    theta: &PolicyParams,
    reference: &ReferencePolicy,
    spec: &EstimatorSpec,
    row: usize,
    tok: usize,
) -> f64 {
    match spec.kl {
        KlEstimator::Exact => theta.row_kl(reference, row),
        KlEstimator::K3 => {
            let log_rho = reference.params().row_log_prob(row, tok) - theta.row_log_prob(row, tok);
            log_rho.exp() - log_rho - 1.0
        }
    }
}

fn require_mode(spec: &EstimatorSpec, expected: RatioMode) -> Result<()> {
    if spec.ratio != expected {
        return Err(LabError::config(
            "estimator.ratio",
            format!("expected {expected:?} ratios, got {:?}", spec.ratio),
        ));
    }
    Ok(())
}

/// Accumulates one group's contribution into `grad`; returns the tally.
fn accumulate(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    group: &Group,
    spec: &EstimatorSpec,
    reference: &ReferencePolicy,
    grad: &mut [f64],
    tally: &mut RatioTally,
) {
    let weights = length_weights(group, spec.length_norm);
    let clip = spec.effective_clip();
    for ((traj, &a), &c) in group.trajectories().iter().zip(group.advantages()).zip(&weights) {
        let seq = &traj.sequence;
        match spec.ratio {
            RatioMode::Token => {
                for (row, tok) in seq.steps() {
                    let w = (theta.row_log_prob(row, tok) - theta_old.row_log_prob(row, tok)).exp();
                    let active = clip.is_active(w, a);
                    tally.record(w, active);
                    if active && a != 0.0 {
                        theta.add_row_score(row, tok, c * w * a, grad);
                    }
                }
            }
            RatioMode::Trajectory => {
                let w = traj_ratio(theta, theta_old, seq);
                let active = clip.is_active(w, a);
                tally.record(w, active);
                if active && a != 0.0 {
                    for (row, tok) in seq.steps() {
                        theta.add_row_score(row, tok, c * w * a, grad);
                    }
                }
            }
            RatioMode::None => {
                for (row, tok) in seq.steps() {
                    let w = (theta.row_log_prob(row, tok) - theta_old.row_log_prob(row, tok)).exp();
                    tally.record(w, true);
                    if a != 0.0 {
                        theta_old.add_row_score(row, tok, c * a, grad);
                    }
                }
            }
        }
        for (row, tok) in seq.steps() {
            add_penalty_grad(theta, reference, spec, row, tok, c, grad);
        }
    }
}

/// Gradient of the configured surrogate, averaged over `groups`.
pub fn estimate_gradient(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    groups: &[Group],
    spec: &EstimatorSpec,
    reference: &ReferencePolicy,
) -> Result<GradientEstimate> {
    if groups.is_empty() {
        return Err(LabError::domain("gradient requested for an empty mini-batch"));
    }
    let mut vector = vec![0.0; theta.dim()];
    let mut tally = RatioTally::default();
    for group in groups {
        accumulate(theta, theta_old, group, spec, reference, &mut vector, &mut tally);
    }
    if groups.len() > 1 {
        let scale = 1.0 / groups.len() as f64;
        vector.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(GradientEstimate {
        vector,
        estimator: *spec,
        diagnostics: tally.finish(),
    })
}

/// Token-level GRPO gradient: `Σ_i c_i Σ_t 1_B w ∇log π_θ A_i − β·penalty`.
pub fn grpo_gradient(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    group: &Group,
    spec: &EstimatorSpec,
    reference: &ReferencePolicy,
) -> Result<GradientEstimate> {
    require_mode(spec, RatioMode::Token)?;
    estimate_gradient(theta, theta_old, std::slice::from_ref(group), spec, reference)
}

/// Trajectory-level TIC-GRPO gradient: `Σ_i c_i 1_D w′ ∇log P_θ A_i − β·penalty`.
pub fn tic_gradient(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    group: &Group,
    spec: &EstimatorSpec,
    reference: &ReferencePolicy,
) -> Result<GradientEstimate> {
    require_mode(spec, RatioMode::Trajectory)?;
    estimate_gradient(theta, theta_old, std::slice::from_ref(group), spec, reference)
}

/// Old-policy gradient without ratios or clipping; the penalty is taken at
/// the current `θ`.
pub fn ablation_gradient(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    group: &Group,
    spec: &EstimatorSpec,
    reference: &ReferencePolicy,
) -> Result<GradientEstimate> {
    require_mode(spec, RatioMode::None)?;
    estimate_gradient(theta, theta_old, std::slice::from_ref(group), spec, reference)
}

/// Scalar objective whose gradient the estimators return, averaged over
/// `groups`.
///
/// The ablation has no such objective in `θ`; it is represented by the
/// linearization `Σ_i c_i Σ_t A_i ⟨∇log π_old, θ − θ_old⟩`, whose gradient
/// is the ablation direction everywhere.
pub fn surrogate_objective(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    groups: &[Group],
    spec: &EstimatorSpec,
    reference: &ReferencePolicy,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(LabError::domain("objective requested for an empty mini-batch"));
    }
    let clip = spec.effective_clip();
    let mut total = 0.0;
    let mut score = vec![0.0; theta.dim()];
    for group in groups {
        let weights = length_weights(group, spec.length_norm);
        for ((traj, &a), &c) in group.trajectories().iter().zip(group.advantages()).zip(&weights) {
            let seq = &traj.sequence;
            match spec.ratio {
                RatioMode::Token => {
                    for (row, tok) in seq.steps() {
                        let w = (theta.row_log_prob(row, tok) - theta_old.row_log_prob(row, tok)).exp();
                        total += c * clip.surrogate(w, a);
                    }
                }
                RatioMode::Trajectory => {
                    total += c * clip.surrogate(traj_ratio(theta, theta_old, seq), a);
                }
                RatioMode::None => {
                    score.iter_mut().for_each(|v| *v = 0.0);
                    for (row, tok) in seq.steps() {
                        theta_old.add_row_score(row, tok, 1.0, &mut score);
                    }
                    let lin: f64 = score
                        .iter()
                        .zip(theta.as_slice().iter().zip(theta_old.as_slice()))
                        .map(|(s, (x, x0))| s * (x - x0))
                        .sum();
                    total += c * a * lin;
                }
            }
            if spec.beta != 0.0 {
                for (row, tok) in seq.steps() {
                    total -= spec.beta * c * penalty_value(theta, reference, spec, row, tok);
                }
            }
        }
    }
    Ok(total / groups.len() as f64)
}

/// Named terms of a gradient-term decomposition. `whole` is the estimator's
/// gradient term (no KL penalty); the other terms sum to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub ratio: RatioMode,
    pub whole: Vec<f64>,
    /// `(κ/σ̄_G)·∇̃J`, the part whose expectation is the scaled policy gradient.
    pub scaled_unbiased_term: Vec<f64>,
    /// Token-level only: `(κ/σ̄_G)(1/|G|) Σ_i Σ_t (w∇log π_θ − ∇log π_old)(r_i − μ̄_G)`.
    pub gradient_error: Option<Vec<f64>>,
    pub sampling_error_1: Vec<f64>,
    pub sampling_error_2: Vec<f64>,
    pub clip_error: Vec<f64>,
    /// `‖whole − Σ terms‖`.
    pub residual: f64,
}

impl DecompositionReport {
    pub fn terms(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![("scaled_unbiased_term", &self.scaled_unbiased_term)];
        if let Some(g) = &self.gradient_error {
            out.push(("gradient_error", g));
        }
        out.push(("sampling_error_1", &self.sampling_error_1));
        out.push(("sampling_error_2", &self.sampling_error_2));
        out.push(("clip_error", &self.clip_error));
        out
    }

    /// Whether the residual meets `1e-10 · (1 + ‖whole‖)`.
    pub fn is_exact(&self) -> bool {
        self.residual <= 1e-10 * (1.0 + norm(&self.whole))
    }

    fn finish(mut self) -> Self {
        let mut sum = vec![0.0; self.whole.len()];
        for (_, term) in self.terms() {
            axpy(1.0, term, &mut sum);
        }
        self.residual = sum
            .iter()
            .zip(&self.whole)
            .map(|(s, w)| (s - w) * (s - w))
            .sum::<f64>()
            .sqrt();
        self
    }
}

/// `κ` and `σ̄_G` for a decomposition, checked against the group.
fn scale_constants(group: &Group, spec: &EstimatorSpec, stats: &PopulationStats) -> Result<(f64, f64)> {
    if stats.sigma_bar <= 0.0 {
        return Err(LabError::Degenerate(
            "mean group reward spread is zero; the decomposition divides by it".into(),
        ));
    }
    if stats.group_size != group.size() {
        return Err(LabError::domain(format!(
            "population stats were computed for |G| = {}, group has {}",
            stats.group_size,
            group.size()
        )));
    }
    let kappa = match spec.length_norm {
        LengthNorm::PerTrajectory => stats.inv_len,
        LengthNorm::GlobalSum => 1.0 / stats.mean_len,
    };
    Ok((kappa, stats.sigma_bar))
}

/// Splits the token-level gradient term into
/// `(κ/σ̄)∇̃J(θ_old) + gradient error + sampling errors 1, 2 + clip error`.
pub fn decompose_grpo(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    group: &Group,
    spec: &EstimatorSpec,
    stats: &PopulationStats,
) -> Result<DecompositionReport> {
    require_mode(spec, RatioMode::Token)?;
    let (kappa, sigma_bar) = scale_constants(group, spec, stats)?;
    let dim = theta.dim();
    let g = group.size() as f64;
    let weights = length_weights(group, spec.length_norm);
    let mut whole = vec![0.0; dim];
    let mut unbiased = vec![0.0; dim];
    let mut grad_err = vec![0.0; dim];
    let mut se1 = vec![0.0; dim];
    let mut se2 = vec![0.0; dim];
    let mut clip_err = vec![0.0; dim];
    let lead = kappa / (sigma_bar * g);
    for (((traj, &a), &r), &c) in group
        .trajectories()
        .iter()
        .zip(group.advantages())
        .zip(group.rewards())
        .zip(&weights)
    {
        let centered = r - stats.mu_bar;
        let normalized = centered / sigma_bar;
        for (row, tok) in traj.sequence.steps() {
            let w = (theta.row_log_prob(row, tok) - theta_old.row_log_prob(row, tok)).exp();
            theta_old.add_row_score(row, tok, lead * centered, &mut unbiased);
            theta.add_row_score(row, tok, lead * w * centered, &mut grad_err);
            theta_old.add_row_score(row, tok, -lead * centered, &mut grad_err);
            if spec.clip.is_active(w, a) {
                theta.add_row_score(row, tok, c * w * a, &mut whole);
                theta.add_row_score(row, tok, kappa / g * w * (a - normalized), &mut se1);
                theta.add_row_score(row, tok, (c - kappa / g) * w * a, &mut se2);
            } else {
                theta.add_row_score(row, tok, -lead * w * centered, &mut clip_err);
            }
        }
    }
    Ok(DecompositionReport {
        ratio: RatioMode::Token,
        whole,
        scaled_unbiased_term: unbiased,
        gradient_error: Some(grad_err),
        sampling_error_1: se1,
        sampling_error_2: se2,
        clip_error: clip_err,
        residual: 0.0,
    }
    .finish())
}

/// Splits the trajectory-level gradient term into
/// `(κ/σ̄)∇̃J(θ) + sampling errors 1, 2 + clip error`.
pub fn decompose_tic(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    group: &Group,
    spec: &EstimatorSpec,
    stats: &PopulationStats,
) -> Result<DecompositionReport> {
    require_mode(spec, RatioMode::Trajectory)?;
    let (kappa, sigma_bar) = scale_constants(group, spec, stats)?;
    let dim = theta.dim();
    let g = group.size() as f64;
    let weights = length_weights(group, spec.length_norm);
    let mut whole = vec![0.0; dim];
    let mut unbiased = vec![0.0; dim];
    let mut se1 = vec![0.0; dim];
    let mut se2 = vec![0.0; dim];
    let mut clip_err = vec![0.0; dim];
    let mut traj_score = vec![0.0; dim];
    let lead = kappa / (sigma_bar * g);
    for (((traj, &a), &r), &c) in group
        .trajectories()
        .iter()
        .zip(group.advantages())
        .zip(group.rewards())
        .zip(&weights)
    {
        let seq = &traj.sequence;
        let centered = r - stats.mu_bar;
        let normalized = centered / sigma_bar;
        let w = traj_ratio(theta, theta_old, seq);
        traj_score.iter_mut().for_each(|v| *v = 0.0);
        for (row, tok) in seq.steps() {
            theta.add_row_score(row, tok, 1.0, &mut traj_score);
        }
        axpy(lead * w * centered, &traj_score, &mut unbiased);
        if spec.clip.is_active(w, a) {
            axpy(c * w * a, &traj_score, &mut whole);
            axpy(kappa / g * w * (a - normalized), &traj_score, &mut se1);
            axpy((c - kappa / g) * w * a, &traj_score, &mut se2);
        } else {
            axpy(-lead * w * centered, &traj_score, &mut clip_err);
        }
    }
    Ok(DecompositionReport {
        ratio: RatioMode::Trajectory,
        whole,
        scaled_unbiased_term: unbiased,
        gradient_error: None,
        sampling_error_1: se1,
        sampling_error_2: se2,
        clip_error: clip_err,
        residual: 0.0,
    }
    .finish())
}

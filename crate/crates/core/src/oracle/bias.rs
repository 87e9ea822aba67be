//! Monte Carlo bias study of an estimator against the scaled exact
//! gradients at `θ` and at `θ_old`.

use rand::Rng;
use serde::Serialize;

use super::exact_j_and_grad;
use crate::env::{Reward, TrajectorySpace};
use crate::error::{LabError, Result};
use crate::group::{group_population_stats, sample_group, PopulationStats};
use crate::objectives::{
    decompose_grpo, decompose_tic, estimate_gradient, ClipMode, EstimatorSpec, LengthNorm, RatioMode,
};
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::stats::{max_z, VectorMoments};

/// Task context shared by every study on one prompt.
#[derive(Debug, Clone)]
pub struct BiasStudySetup<'a> {
    pub space: &'a TrajectorySpace,
    pub reward: &'a Reward,
    pub group_size: usize,
    pub delta: f64,
    /// Groups simulated to estimate `σ̄_G`.
    pub sigma_samples: usize,
}

/// The leading term of the decomposition checked against the same targets.
#[derive(Debug, Clone, Serialize)]
pub struct LeadTermCheck {
    pub mc_mean: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    pub z_current: f64,
    pub z_old: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasStudy {
    #[serde(skip)]
    pub estimator: EstimatorSpec,
    pub samples: usize,
    pub mc_mean: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    /// `(κ/σ̄_G)·∇J(θ)`.
    pub target_current: Vec<f64>,
    /// `(κ/σ̄_G)·∇J(θ_old)`.
    pub target_old: Vec<f64>,
    /// Max componentwise `|mc_mean − target| / se`, where `se` combines the
    /// Monte Carlo error with the propagated error of `σ̄_G`.
    pub z_current: f64,
    pub z_old: f64,
    /// Max componentwise `|target_current − target_old| / se_mc`.
    pub separation: f64,
    pub sigma_bar: f64,
    pub sigma_bar_stderr: f64,
    pub scale: f64,
    pub lead: Option<LeadTermCheck>,
}

impl BiasStudy {
    /// Whether the targets are far enough apart for the study to
    /// discriminate between them.
    pub fn separated(&self, threshold: f64) -> bool {
        self.separation > threshold
    }
}

fn combined_stderr(mc_se: &[f64], target: &[f64], rel_scale_err: f64) -> Vec<f64> {
    mc_se
        .iter()
        .zip(target)
        .map(|(s, t)| (s * s + (t * rel_scale_err).powi(2)).sqrt())
        .collect()
}

/// Averages the estimator over `samples` independent old-policy groups and
/// compares the mean with both scaled exact gradients.
///
/// Clipping must be disabled and `β = 0`: the targets are reward
/// gradients before any clip effect.
pub fn estimator_bias_study<R: Rng + ?Sized>(
    setup: &BiasStudySetup<'_>,
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    estimator: &EstimatorSpec,
    samples: usize,
    rng: &mut R,
) -> Result<BiasStudy> {
    if samples < 10_000 {
        return Err(LabError::config("bias_study.samples", "must be at least 10^4"));
    }
    if estimator.ratio != RatioMode::None && estimator.clip.mode != ClipMode::Disabled {
        return Err(LabError::config("bias_study.clip", "clipping must be disabled"));
    }
    if estimator.beta != 0.0 {
        return Err(LabError::config("bias_study.beta", "the KL penalty must be off"));
    }
    let stats: PopulationStats = group_population_stats(
        theta_old,
        setup.space,
        setup.reward,
        setup.group_size,
        setup.sigma_samples,
        rng,
    )?;
    if stats.sigma_bar < 1e-8 {
        return Err(LabError::Degenerate(format!(
            "σ̄_G = {:.3e} under θ_old",
            stats.sigma_bar
        )));
    }
    let kappa = match estimator.length_norm {
        LengthNorm::PerTrajectory => stats.inv_len,
        LengthNorm::GlobalSum => 1.0 / stats.mean_len,
    };
    let scale = kappa / stats.sigma_bar;
    let reference = ReferencePolicy::new(theta_old.clone());
    let grad_now = exact_j_and_grad(theta, setup.space, setup.reward, 0.0, &reference).grad_j;
    let grad_old = exact_j_and_grad(theta_old, setup.space, setup.reward, 0.0, &reference).grad_j;
    let target_current: Vec<f64> = grad_now.iter().map(|g| scale * g).collect();
    let target_old: Vec<f64> = grad_old.iter().map(|g| scale * g).collect();

    let dim = theta.dim();
    let mut moments = VectorMoments::new(dim);
    let mut lead_moments = VectorMoments::new(dim);
    let lead_spec = match estimator.ratio {
        RatioMode::Trajectory => *estimator,
        _ => EstimatorSpec {
            ratio: RatioMode::Token,
            ..*estimator
        },
    };
    // The ablation's leading term is the token-level one evaluated at θ_old.
    let lead_theta = if estimator.ratio == RatioMode::None {
        theta_old
    } else {
        theta
    };
    let prompt = setup.space.prompt();
    for _ in 0..samples {
        let group = sample_group(theta_old, prompt, setup.group_size, setup.reward, setup.delta, rng)?;
        let est = estimate_gradient(theta, theta_old, std::slice::from_ref(&group), estimator, &reference)?;
        moments.push(&est.vector);
        let report = match lead_spec.ratio {
            RatioMode::Trajectory => decompose_tic(lead_theta, theta_old, &group, &lead_spec, &stats)?,
            _ => decompose_grpo(lead_theta, theta_old, &group, &lead_spec, &stats)?,
        };
        lead_moments.push(&report.scaled_unbiased_term);
    }

    let rel = stats.sigma_bar_stderr / stats.sigma_bar;
    let mc_stderr = moments.stderr();
    let mc_mean = moments.mean().to_vec();
    let z_current = max_z(
        &mc_mean,
        &target_current,
        &combined_stderr(&mc_stderr, &target_current, rel),
    );
    let z_old = max_z(&mc_mean, &target_old, &combined_stderr(&mc_stderr, &target_old, rel));
    let separation = max_z(&target_current, &target_old, &mc_stderr);

    let lead_se = lead_moments.stderr();
    let lead_mean = lead_moments.mean().to_vec();
    let lead = LeadTermCheck {
        z_current: max_z(
            &lead_mean,
            &target_current,
            &combined_stderr(&lead_se, &target_current, rel),
        ),
        z_old: max_z(&lead_mean, &target_old, &combined_stderr(&lead_se, &target_old, rel)),
        mc_mean: lead_mean,
        mc_stderr: lead_se,
    };

    Ok(BiasStudy {
        estimator: *estimator,
        samples,
        mc_mean,
        mc_stderr,
        target_current,
        target_old,
        z_current,
        z_old,
        separation,
        sigma_bar: stats.sigma_bar,
        sigma_bar_stderr: stats.sigma_bar_stderr,
        scale,
        lead: Some(lead),
    })
}

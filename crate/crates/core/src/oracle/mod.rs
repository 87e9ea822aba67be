//! Ground truth by enumeration of the trajectory space.

mod bias;
mod smoothness;
mod sweep;

pub use bias::{estimator_bias_study, BiasStudy, BiasStudySetup, LeadTermCheck};
pub use smoothness::{random_pairs, smoothness_probe, SmoothnessReport};
pub use sweep::{convergence_sweep, trend_checks, SweepCell, SweepGrid, SweepRow, TrendCheck, TrendKind};

use crate::env::{Reward, TrajectorySpace};
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::trajectory::step_logprobs;

/// `J`, `∇J`, and the KL-penalized `𝒥 = J − β·KL` with its gradient.
///
/// The KL term is the expected sum over visited states of the per-step
/// categorical KL to the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGradients {
    pub j: f64,
    pub grad_j: Vec<f64>,
    pub kl: f64,
    pub j_kl: f64,
    pub grad_j_kl: Vec<f64>,
}

pub fn exact_j_and_grad(
    theta: &PolicyParams,
    space: &TrajectorySpace,
    reward: &Reward,
    beta: f64,
    reference: &ReferencePolicy,
) -> ExactGradients {
    exact_with_rewards(theta, space, &space.rewards(reward), beta, reference)
}

/// As [`exact_j_and_grad`] with `rewards[k]` the reward of the `k`-th
/// enumerated sequence.
pub fn exact_with_rewards(
    theta: &PolicyParams,
    space: &TrajectorySpace,
    rewards: &[f64],
    beta: f64,
    reference: &ReferencePolicy,
) -> ExactGradients {
    assert_eq!(rewards.len(), space.len(), "one reward per enumerated sequence");
    let dim = theta.dim();
    let mut j = 0.0;
    let mut grad_j = vec![0.0; dim];
    let mut kl = 0.0;
    let mut grad_kl = vec![0.0; dim];
    let with_kl = beta != 0.0;
    for (seq, &r) in space.sequences().iter().zip(rewards) {
        let p: f64 = step_logprobs(theta, seq).iter().sum::<f64>().exp();
        j += p * r;
        let path_kl = if with_kl {
            seq.rows().iter().map(|&row| theta.row_kl(reference, row)).sum()
        } else {
            0.0
        };
        kl += p * path_kl;
        for (row, tok) in seq.steps() {
            theta.add_row_score(row, tok, p * r, &mut grad_j);
            if with_kl {
                theta.add_row_score(row, tok, p * path_kl, &mut grad_kl);
                theta.add_row_kl_grad(reference, row, p, &mut grad_kl);
            }
        }
    }
    let grad_j_kl = grad_j.iter().zip(&grad_kl).map(|(g, k)| g - beta * k).collect();
    ExactGradients {
        j,
        grad_j,
        kl,
        j_kl: j - beta * kl,
        grad_j_kl,
    }
}

/// Average of [`exact_j_and_grad`] over prompts drawn uniformly.
pub fn exact_over_prompts(
    theta: &PolicyParams,
    spaces: &[TrajectorySpace],
    reward: &Reward,
    beta: f64,
    reference: &ReferencePolicy,
) -> ExactGradients {
    let n = spaces.len() as f64;
    let mut acc: Option<ExactGradients> = None;
    for space in spaces {
        let e = exact_j_and_grad(theta, space, reward, beta, reference);
        acc = Some(match acc {
            None => e,
            Some(mut a) => {
                a.j += e.j;
                a.kl += e.kl;
                a.j_kl += e.j_kl;
                a.grad_j.iter_mut().zip(&e.grad_j).for_each(|(x, y)| *x += y);
                a.grad_j_kl.iter_mut().zip(&e.grad_j_kl).for_each(|(x, y)| *x += y);
                a
            }
        });
    }
    let mut a = acc.expect("at least one prompt");
    a.j /= n;
    a.kl /= n;
    a.j_kl /= n;
    a.grad_j.iter_mut().for_each(|x| *x /= n);
    a.grad_j_kl.iter_mut().for_each(|x| *x /= n);
    a
}

/// `J(θ)` only, averaged over prompts.
pub fn exact_j(theta: &PolicyParams, spaces: &[TrajectorySpace], reward: &Reward) -> f64 {
    let total: f64 = spaces
        .iter()
        .map(|space| {
            space
                .sequences()
                .iter()
                .map(|seq| {
                    let p = step_logprobs(theta, seq).iter().sum::<f64>().exp();
                    p * reward.evaluate(seq).expect("enumerated sequences are terminal")
                })
                .sum::<f64>()
        })
        .sum();
    total / spaces.len() as f64
}

/// `J* = max_θ J(θ)`: every trajectory is reachable by a deterministic
/// policy, so per prompt it is the best single reward.
pub fn optimal_value(spaces: &[TrajectorySpace], reward: &Reward) -> f64 {
    let total: f64 = spaces
        .iter()
        .map(|s| s.rewards(reward).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / spaces.len() as f64
}

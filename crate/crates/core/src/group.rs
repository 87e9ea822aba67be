//! Groups of trajectories drawn from the old policy and their
//! group-normalized advantages.

use rand::Rng;

use crate::env::{Reward, TrajectorySpace};
use crate::error::{LabError, Result};
use crate::policy::PolicyParams;
use crate::stats::{mean_and_stderr, Categorical};
use crate::trajectory::{sample_trajectory, Trajectory};

pub const DEFAULT_DELTA: f64 = 1e-4;

/// Mean, population standard deviation and advantages
/// `A_i = (r_i − μ_G) / (σ_G + δ)` of a reward vector.
///
/// A group whose rewards are all identical gets `σ_G = 0` and all-zero
/// advantages, whatever `δ` is.
pub fn normalize_rewards(rewards: &[f64], delta: f64) -> (f64, f64, Vec<f64>) {
    let n = rewards.len() as f64;
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return (first, 0.0, vec![0.0; rewards.len()]);
    }
    let mu = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let adv = rewards.iter().map(|r| (r - mu) / (sigma + delta)).collect();
    (mu, sigma, adv)
}

/// `|G|` trajectories for one prompt with rewards and advantages. Immutable
/// once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    trajectories: Vec<Trajectory>,
    rewards: Vec<f64>,
    mu: f64,
    sigma: f64,
    delta: f64,
    advantages: Vec<f64>,
}

impl Group {
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<f64>, delta: f64) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(LabError::config("group_size", "a group needs at least 2 trajectories"));
        }
        if rewards.len() != trajectories.len() {
            return Err(LabError::domain("one reward per trajectory required"));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(LabError::config("delta", "must be finite and >= 0"));
        }
        let (mu, sigma, advantages) = normalize_rewards(&rewards, delta);
        Ok(Group {
            trajectories,
            rewards,
            mu,
            sigma,
            delta,
            advantages,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Total token count `Σ_i |s_T^{(i)}|`.
    pub fn total_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Samples `g` i.i.d. trajectories from `old` and normalizes their rewards.
pub fn sample_group<R: Rng + ?Sized>(
    old: &PolicyParams,
    prompt: usize,
    g: usize,
    reward: &Reward,
    delta: f64,
    rng: &mut R,
) -> Result<Group> {
    if g < 2 {
        return Err(LabError::config("group_size", "must be at least 2"));
    }
    let mut trajectories = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    for _ in 0..g {
        let t = sample_trajectory(old, prompt, rng)?;
        rewards.push(reward.evaluate(&t.sequence)?);
        trajectories.push(t);
    }
    Group::new(trajectories, rewards, delta)
}

/// Old-policy population quantities used by the gradient decompositions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationStats {
    /// `μ̄_G = E[r]`, exact.
    pub mu_bar: f64,
    /// `σ̄_G = E[σ_G]`, Monte Carlo.
    pub sigma_bar: f64,
    pub sigma_bar_stderr: f64,
    /// `T^{(−1)} = E[1/|s_T|]`, exact.
    pub inv_len: f64,
    /// `E[|s_T|]`, exact.
    pub mean_len: f64,
    pub group_size: usize,
    pub mc_samples: usize,
}

/// Exact single-trajectory expectations by enumeration, `σ̄_G` by
/// `mc_samples` simulated groups of size `g`.
pub fn group_population_stats<R: Rng + ?Sized>(
    old: &PolicyParams,
    space: &TrajectorySpace,
    reward: &Reward,
    g: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<PopulationStats> {
    if g < 2 {
        return Err(LabError::config("group_size", "must be at least 2"));
    }
    if mc_samples < 1000 {
        return Err(LabError::config("mc_samples", "must be at least 1000"));
    }
    let probs = space.probabilities(old);
    let rewards = space.rewards(reward);
    let lens: Vec<f64> = space.sequences().iter().map(|s| s.len() as f64).collect();
    let mu_bar = probs.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    let inv_len = probs.iter().zip(&lens).map(|(p, l)| p / l).sum();
    let mean_len = probs.iter().zip(&lens).map(|(p, l)| p * l).sum();

    let sampler = Categorical::new(&probs);
    let mut draw = vec![0.0; g];
    let sigmas: Vec<f64> = (0..mc_samples)
        .map(|_| {
            for slot in draw.iter_mut() {
                *slot = rewards[sampler.sample(rng)];
            }
            normalize_rewards(&draw, 0.0).1
        })
        .collect();
    let (sigma_bar, sigma_bar_stderr) = mean_and_stderr(&sigmas);
    Ok(PopulationStats {
        mu_bar,
        sigma_bar,
        sigma_bar_stderr,
        inv_len,
        mean_len,
        group_size: g,
        mc_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{enumerate, RewardSpec};
    use crate::policy::{Layout, Vocab};
    use crate::trajectory::Sequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn closed_form_advantages() {
        let (mu, sigma, adv) = normalize_rewards(&[1.0, 0.0, 1.0, 0.0], 0.0);
        assert_eq!(mu, 0.5);
        assert_eq!(sigma, 0.5);
        assert_eq!(adv, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn equal_rewards_give_zero_advantages() {
        let (_, sigma, adv) = normalize_rewards(&[0.1, 0.1, 0.1], 1e-4);
        assert_eq!(sigma, 0.0);
        assert!(adv.iter().all(|&a| a == 0.0));
        let (_, _, adv) = normalize_rewards(&[0.3; 5], 0.0);
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn singleton_group_rejected() {
        let l = Arc::new(Layout::new(Vocab::new(2, None).unwrap(), 1, 1).unwrap());
        let p = PolicyParams::zeros(l.clone());
        let r = Reward::new(RewardSpec::RandomTable { seed: 0, bound: 1.0 }, &l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_group(&p, 0, 1, &r, 0.0, &mut rng),
            Err(LabError::Config { .. })
        ));
    }

    #[test]
    fn point_mass_population() {
        let l = Arc::new(Layout::new(Vocab::new(3, Some(0)).unwrap(), 3, 1).unwrap());
        let mut p = PolicyParams::zeros(l.clone());
        // Force 2, then eos.
        let root = l.root_row(0);
        p.as_mut_slice()[root * 3 + 2] = 1e6;
        let child = l.child_row(root, 0, 2).unwrap();
        p.as_mut_slice()[child * 3] = 1e6;
        let r = Reward::new(RewardSpec::RandomTable { seed: 5, bound: 1.0 }, &l).unwrap();
        let space = enumerate(&l, 0, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = group_population_stats(&p, &space, &r, 4, 1000, &mut rng).unwrap();
        let r0 = r.evaluate(&Sequence::new(&l, 0, vec![2, 0]).unwrap()).unwrap();
        assert!((stats.mu_bar - r0).abs() < 1e-12);
        assert_eq!(stats.sigma_bar, 0.0);
        assert!((stats.inv_len - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_enumerated_mean_reward() {
        let l = Arc::new(Layout::new(Vocab::new(2, None).unwrap(), 2, 1).unwrap());
        let p = PolicyParams::zeros(l.clone());
        let r = Reward::new(RewardSpec::RandomTable { seed: 17, bound: 1.0 }, &l).unwrap();
        let mut by_hand = 0.0;
        for toks in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            by_hand += 0.25 * r.evaluate(&Sequence::new(&l, 0, toks.to_vec()).unwrap()).unwrap();
        }
        let space = enumerate(&l, 0, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats = group_population_stats(&p, &space, &r, 4, 1000, &mut rng).unwrap();
        assert!((stats.mu_bar - by_hand).abs() < 1e-15);
        assert_eq!(stats.inv_len, 0.5);
        assert_eq!(stats.mean_len, 2.0);
    }

    #[test]
    fn too_few_mc_samples_rejected() {
        let l = Arc::new(Layout::new(Vocab::new(2, None).unwrap(), 1, 1).unwrap());
        let p = PolicyParams::zeros(l.clone());
        let r = Reward::new(RewardSpec::RandomTable { seed: 0, bound: 1.0 }, &l).unwrap();
        let space = enumerate(&l, 0, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(group_population_stats(&p, &space, &r, 4, 999, &mut rng).is_err());
    }
}

use std::sync::Arc;

use grpo_lab::env::TrajectorySpace;
use grpo_lab::objectives::{token_ratio, ClipMode};
use grpo_lab::policy::{Layout, PolicyParams, ReferencePolicy, Vocab};
use grpo_lab::stats::norm;
use grpo_lab::trainer::{run, Algorithm, Task, TrainConfig};
use grpo_lab::{
    ablation_gradient, decompose_grpo, decompose_tic, enumerate, estimate_gradient, group_population_stats,
    grpo_gradient, sample_group, surrogate_objective, tic_gradient, traj_ratio, ClipConfig, EstimatorSpec, Group,
    KlEstimator, LengthNorm, Reward, RewardSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    layout: Arc<Layout>,
    space: TrajectorySpace,
    reward: Reward,
}

fn fixture(eos: Option<usize>) -> Fixture {
    let layout = Arc::new(Layout::new(Vocab::new(3, eos).unwrap(), 3, 1).unwrap());
    let space = enumerate(&layout, 0, 1000).unwrap();
    let reward = Reward::new(RewardSpec::RandomTable { seed: 13, bound: 1.0 }, &layout).unwrap();
    Fixture { layout, space, reward }
}

fn perturbed(p: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut q = p.clone();
    for x in q.as_mut_slice() {
        *x += scale * rng.random_range(-1.0..1.0);
    }
    q
}

fn nondegenerate_group(f: &Fixture, old: &PolicyParams, g: usize, rng: &mut ChaCha8Rng) -> Group {
    loop {
        let group = sample_group(old, 0, g, &f.reward, 1e-4, rng).unwrap();
        if group.sigma() > 0.0 {
            return group;
        }
    }
}

/// Distance of the nearest clip boundary to any ratio the estimator uses.
fn kink_distance(theta: &PolicyParams, old: &PolicyParams, groups: &[Group], spec: &EstimatorSpec) -> f64 {
    let clip = spec.effective_clip();
    if clip.mode == ClipMode::Disabled {
        return f64::INFINITY;
    }
    let bounds = [1.0 - clip.eps_low, 1.0 + clip.eps_high];
    let mut d = f64::INFINITY;
    for g in groups {
        for t in g.trajectories() {
            let ratios: Vec<f64> = match spec.ratio {
                grpo_lab::RatioMode::Trajectory => vec![traj_ratio(theta, old, &t.sequence)],
                _ => (0..t.len())
                    .map(|i| token_ratio(theta, old, &t.sequence, i).unwrap())
                    .collect(),
            };
            for w in ratios {
                for b in bounds {
                    d = d.min((w - b).abs());
                }
            }
        }
    }
    d
}

fn check_surrogate_gradient(spec: EstimatorSpec, eos: Option<usize>, seed: u64) {
    let f = fixture(eos);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut probes = 0;
    while probes < 10 {
        let old = PolicyParams::random(f.layout.clone(), 1.0, &mut rng);
        let theta = perturbed(&old, 0.3, &mut rng);
        let reference = ReferencePolicy::new(PolicyParams::random(f.layout.clone(), 1.0, &mut rng));
        let groups: Vec<Group> = (0..2).map(|_| nondegenerate_group(&f, &old, 4, &mut rng)).collect();
        if kink_distance(&theta, &old, &groups, &spec) < 1e-3 {
            continue;
        }
        probes += 1;
        let an = estimate_gradient(&theta, &old, &groups, &spec, &reference)
            .unwrap()
            .vector;
        for (i, &a) in an.iter().enumerate() {
            let mut plus = theta.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = theta.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (surrogate_objective(&plus, &old, &groups, &spec, &reference).unwrap()
                - surrogate_objective(&minus, &old, &groups, &spec, &reference).unwrap())
                / (2.0 * h);
            assert!(
                (fd - a).abs() <= 1e-5 * a.abs() + 1e-8,
                "{spec:?} component {i}: fd {fd}, analytic {a}"
            );
        }
    }
}

#[test]
fn token_level_gradient_matches_objective() {
    check_surrogate_gradient(EstimatorSpec::grpo(ClipConfig::two_sided(0.2, 0.28)), Some(0), 1);
}

#[test]
fn trajectory_level_gradient_matches_objective() {
    check_surrogate_gradient(EstimatorSpec::tic(ClipConfig::upper_only(0.28)), Some(0), 2);
}

#[test]
fn ablation_gradient_matches_linearization() {
    check_surrogate_gradient(EstimatorSpec::ablation(), Some(0), 3);
}

#[test]
fn penalized_and_global_sum_variants_match_objective() {
    let clip = ClipConfig::two_sided(0.2, 0.28);
    check_surrogate_gradient(EstimatorSpec::grpo(clip).with_beta(0.2), Some(0), 4);
    check_surrogate_gradient(
        EstimatorSpec::tic(ClipConfig::upper_only(0.28))
            .with_beta(0.3)
            .with_kl(KlEstimator::K3),
        Some(0),
        5,
    );
    check_surrogate_gradient(
        EstimatorSpec::grpo(clip).with_length_norm(LengthNorm::GlobalSum),
        Some(0),
        6,
    );
    check_surrogate_gradient(EstimatorSpec::ablation().with_beta(0.1), None, 7);
}

#[test]
fn equal_old_and_current_parameters_collapse_estimators() {
    let f = fixture(Some(0));
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let p = PolicyParams::random(f.layout.clone(), 1.0, &mut rng);
    let reference = ReferencePolicy::new(p.clone());
    for _ in 0..20 {
        let group = nondegenerate_group(&f, &p, 8, &mut rng);
        for t in group.trajectories() {
            assert_eq!(traj_ratio(&p, &p, &t.sequence), 1.0);
            for i in 0..t.len() {
                assert_eq!(token_ratio(&p, &p, &t.sequence, i).unwrap(), 1.0);
            }
        }
        let off = ClipConfig::disabled();
        let a = grpo_gradient(&p, &p, &group, &EstimatorSpec::grpo(off), &reference).unwrap();
        let b = tic_gradient(&p, &p, &group, &EstimatorSpec::tic(off), &reference).unwrap();
        let c = ablation_gradient(&p, &p, &group, &EstimatorSpec::ablation(), &reference).unwrap();
        for (x, (y, z)) in a.vector.iter().zip(b.vector.iter().zip(&c.vector)) {
            assert!((x - y).abs() <= 1e-12 && (x - z).abs() <= 1e-12);
        }
        let clipped = grpo_gradient(
            &p,
            &p,
            &group,
            &EstimatorSpec::grpo(ClipConfig::two_sided(0.2, 0.28)),
            &reference,
        )
        .unwrap();
        assert_eq!(clipped.diagnostics.clip_fraction, 0.0);
        assert_eq!(clipped.diagnostics.mean_ratio, 1.0);
    }
}

#[test]
fn equal_rewards_give_zero_reward_gradient() {
    let f = fixture(Some(0));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // A near-deterministic policy draws the same sequence every time.
    let mut old = PolicyParams::zeros(f.layout.clone());
    for row in 0..f.layout.rows() {
        old.as_mut_slice()[row * 3 + 1] = 60.0;
    }
    let theta = perturbed(&old, 0.5, &mut rng);
    let group = sample_group(&old, 0, 8, &f.reward, 1e-4, &mut rng).unwrap();
    assert_eq!(group.sigma(), 0.0);
    assert!(group.advantages().iter().all(|&a| a == 0.0));
    let reference = ReferencePolicy::new(old.clone());
    for spec in [
        EstimatorSpec::grpo(ClipConfig::two_sided(0.2, 0.28)),
        EstimatorSpec::tic(ClipConfig::upper_only(0.28)),
        EstimatorSpec::ablation(),
    ] {
        let g = estimate_gradient(&theta, &old, std::slice::from_ref(&group), &spec, &reference).unwrap();
        assert!(g.vector.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn estimator_mode_is_checked() {
    let f = fixture(Some(0));
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = PolicyParams::zeros(f.layout.clone());
    let group = nondegenerate_group(&f, &p, 4, &mut rng);
    let r = ReferencePolicy::new(p.clone());
    assert!(grpo_gradient(&p, &p, &group, &EstimatorSpec::ablation(), &r).is_err());
    assert!(tic_gradient(&p, &p, &group, &EstimatorSpec::grpo(ClipConfig::disabled()), &r).is_err());
    assert!(estimate_gradient(&p, &p, &[], &EstimatorSpec::ablation(), &r).is_err());
}

#[test]
fn decompositions_are_additive() {
    let f = fixture(Some(0));
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..30 {
        let g = [2, 4, 8][case % 3];
        let old = PolicyParams::random(f.layout.clone(), 1.0, &mut rng);
        let theta = perturbed(&old, 0.5, &mut rng);
        let stats = group_population_stats(&old, &f.space, &f.reward, g, 1000, &mut rng).unwrap();
        let group = sample_group(&old, 0, g, &f.reward, 1e-4, &mut rng).unwrap();
        let norm_kind = if case % 2 == 0 {
            LengthNorm::PerTrajectory
        } else {
            LengthNorm::GlobalSum
        };
        let grpo = EstimatorSpec::grpo(ClipConfig::two_sided(0.2, 0.28)).with_length_norm(norm_kind);
        let tic = EstimatorSpec::tic(ClipConfig::upper_only(0.28)).with_length_norm(norm_kind);
        let r = ReferencePolicy::new(old.clone());
        let dg = decompose_grpo(&theta, &old, &group, &grpo, &stats).unwrap();
        let dt = decompose_tic(&theta, &old, &group, &tic, &stats).unwrap();
        assert!(
            dg.is_exact() && dt.is_exact(),
            "residuals {} {}",
            dg.residual,
            dt.residual
        );
        let eg = grpo_gradient(&theta, &old, &group, &grpo, &r).unwrap().vector;
        let et = tic_gradient(&theta, &old, &group, &tic, &r).unwrap().vector;
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff(&dg.whole, &eg) < 1e-14);
        assert!(diff(&dt.whole, &et) < 1e-14);
    }
}

#[test]
fn without_drift_the_gradient_error_vanishes() {
    let f = fixture(Some(0));
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let old = PolicyParams::random(f.layout.clone(), 1.0, &mut rng);
    let stats = group_population_stats(&old, &f.space, &f.reward, 8, 1000, &mut rng).unwrap();
    let group = nondegenerate_group(&f, &old, 8, &mut rng);
    let d = decompose_grpo(
        &old,
        &old,
        &group,
        &EstimatorSpec::grpo(ClipConfig::two_sided(0.2, 0.28)),
        &stats,
    )
    .unwrap();
    assert!(norm(d.gradient_error.as_ref().unwrap()) < 1e-15);
    assert!(norm(&d.clip_error) == 0.0);
}

#[test]
fn fixed_length_sequences_have_no_length_error() {
    let f = fixture(None);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let old = PolicyParams::random(f.layout.clone(), 1.0, &mut rng);
    let theta = perturbed(&old, 0.3, &mut rng);
    let stats = group_population_stats(&old, &f.space, &f.reward, 4, 1000, &mut rng).unwrap();
    let group = nondegenerate_group(&f, &old, 4, &mut rng);
    let d = decompose_tic(
        &theta,
        &old,
        &group,
        &EstimatorSpec::tic(ClipConfig::disabled()),
        &stats,
    )
    .unwrap();
    assert!(norm(&d.sampling_error_2) < 1e-15);
}

#[test]
fn single_inner_step_makes_grpo_and_tic_identical() {
    let f = fixture(Some(0));
    let task = Task {
        layout: f.layout.clone(),
        reward: f.reward.clone(),
        spaces: Some(vec![f.space.clone()]),
    };
    let init = PolicyParams::zeros(f.layout.clone());
    let reference = ReferencePolicy::new(init.clone());
    let mut logs = Vec::new();
    for alg in [Algorithm::Grpo, Algorithm::TicGrpo] {
        let mut cfg = TrainConfig::new(alg);
        cfg.inner_steps = 1;
        cfg.outer_steps = 30;
        cfg.clip = Some(ClipConfig::disabled());
        cfg.seed = 99;
        logs.push(run(&cfg, &task, init.clone(), &reference).unwrap());
    }
    assert_eq!(logs[0].final_params, logs[1].final_params);
    assert_eq!(logs[0].outer, logs[1].outer);
}

//! Empirical Lipschitz constants of the score function and of the KL
//! gradient, used as diagnostics only.

use rand::Rng;
use serde::Serialize;

use crate::policy::{Layout, PolicyParams, ReferencePolicy};
use crate::stats::distance;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothnessReport {
    /// `max ‖∇log π_θ(a|s) − ∇log π_θ′(a|s)‖ / ‖θ − θ′‖`.
    pub score_lipschitz: f64,
    /// `max ‖∇KL_θ(s) − ∇KL_θ′(s)‖ / ‖θ − θ′‖`.
    pub kl_lipschitz: f64,
    pub pairs_used: usize,
}

/// Pairs with `‖θ − θ′‖ < 1e-6` are skipped. An empty `rows` probes every
/// state.
pub fn smoothness_probe(
    pairs: &[(PolicyParams, PolicyParams)],
    rows: &[usize],
    reference: &ReferencePolicy,
) -> SmoothnessReport {
    let mut report = SmoothnessReport {
        score_lipschitz: 0.0,
        kl_lipschitz: 0.0,
        pairs_used: 0,
    };
    for (a, b) in pairs {
        let dist = distance(a.as_slice(), b.as_slice());
        if dist < 1e-6 {
            continue;
        }
        report.pairs_used += 1;
        let all: Vec<usize>;
        let probe_rows = if rows.is_empty() {
            all = (0..a.layout().rows()).collect();
            &all
        } else {
            rows
        };
        let v = a.layout().vocab_size();
        for &row in probe_rows {
            // The score of any token differs between θ and θ′ by the change
            // in the row's probability vector.
            let pa = a.row_probs(row);
            let pb = b.row_probs(row);
            let ds = distance(&pa, &pb);
            report.score_lipschitz = report.score_lipschitz.max(ds / dist);

            let mut ga = vec![0.0; a.dim()];
            let mut gb = vec![0.0; b.dim()];
            a.add_row_kl_grad(reference, row, 1.0, &mut ga);
            b.add_row_kl_grad(reference, row, 1.0, &mut gb);
            let dk = distance(&ga[row * v..(row + 1) * v], &gb[row * v..(row + 1) * v]);
            report.kl_lipschitz = report.kl_lipschitz.max(dk / dist);
        }
    }
    report
}

/// `count` pairs inside `‖θ‖∞ ≤ radius`: `θ` uniform, `θ′` a perturbation of
/// `θ` whose size is log-uniform between `1e-3·radius` and `radius`, so both
/// local and global differences are probed.
pub fn random_pairs<R: Rng + ?Sized>(
    layout: &Arc<Layout>,
    count: usize,
    radius: f64,
    rng: &mut R,
) -> Vec<(PolicyParams, PolicyParams)> {
    let dim = layout.dim();
    (0..count)
        .map(|_| {
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..=radius)).collect();
            let size = radius * 10f64.powf(rng.random_range(-3.0..=0.0));
            let b: Vec<f64> = a
                .iter()
                .map(|x| (x + size * rng.random_range(-1.0..=1.0)).clamp(-radius, radius))
                .collect();
            (
                PolicyParams::from_vec(layout.clone(), a).expect("finite draws"),
                PolicyParams::from_vec(layout.clone(), b).expect("finite draws"),
            )
        })
        .collect()
}

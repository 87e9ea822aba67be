//! Small numeric helpers shared by the estimators, oracle and experiments.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

/// Sampler over a fixed probability vector.
#[derive(Debug, Clone)]
pub struct Categorical(WeightedIndex<f64>);

impl Categorical {
    pub fn new(probs: &[f64]) -> Self {
        Categorical(WeightedIndex::new(probs).expect("probabilities must be non-negative with positive sum"))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.0.sample(rng)
    }
}

/// Sample mean and standard error of the mean (`s / √n`, Bessel-corrected).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample mean and standard deviation (Bessel-corrected).
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let (mean, se) = mean_and_stderr(xs);
    (mean, se * (xs.len() as f64).sqrt())
}

/// Componentwise running mean and variance (Welford), accumulated in a
/// fixed order so results are reproducible.
#[derive(Debug, Clone)]
pub struct VectorMoments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VectorMoments {
    pub fn new(dim: usize) -> Self {
        VectorMoments {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard error of each component's mean.
    pub fn stderr(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `y ← y + alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Largest componentwise `|a − b| / se`, skipping components where both the
/// difference and the standard error vanish. A zero standard error with a
/// non-zero difference yields infinity.
pub fn max_z(a: &[f64], b: &[f64], se: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(se)
        .map(|((x, y), s)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else if *s == 0.0 {
                f64::INFINITY
            } else {
                d / s
            }
        })
        .fold(0.0, f64::max)
}

/// Kendall rank correlation (tau-a) of `xs` against its index order.
pub fn kendall_tau_trend(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            score += match xs[j].partial_cmp(&xs[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

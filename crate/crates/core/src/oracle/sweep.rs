//! Convergence sweep: the post-transient mean of `‖∇𝒥(θ_{n,0})‖²` over a
//! grid of step sizes, inner iterations and group sizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::LabError;
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::stats::mean_and_std;
use crate::trainer::{run, Algorithm, Reuse, Task, TrainConfig, TrainError};

fn default_transient() -> f64 {
    0.5
}

fn default_seeds() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub etas: Vec<f64>,
    #[serde(rename = "K")]
    pub inner_steps: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    /// Runs per cell, with seeds `base_seed, base_seed + 1, ...`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Leading fraction of outer steps excluded from the statistic.
    #[serde(default = "default_transient")]
    pub transient_fraction: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            etas: vec![0.01, 0.05],
            inner_steps: vec![1, 4],
            group_sizes: vec![4, 16],
            algorithms: vec![Algorithm::Grpo, Algorithm::TicGrpo],
            seeds: default_seeds(),
            base_seed: 0,
            transient_fraction: default_transient(),
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), LabError> {
        let empty = |name: &str, len: usize| {
            if len == 0 {
                Err(LabError::config(format!("sweep.{name}"), "grid axis is empty"))
            } else {
                Ok(())
            }
        };
        empty("etas", self.etas.len())?;
        empty("K", self.inner_steps.len())?;
        empty("group_sizes", self.group_sizes.len())?;
        empty("algorithms", self.algorithms.len())?;
        if self.seeds == 0 {
            return Err(LabError::config("sweep.seeds", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.transient_fraction) {
            return Err(LabError::config("sweep.transient_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &algorithm in &self.algorithms {
            for &eta in &self.etas {
                for &inner_steps in &self.inner_steps {
                    for &group_size in &self.group_sizes {
                        out.push(SweepCell {
                            algorithm,
                            eta,
                            inner_steps,
                            group_size,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub inner_steps: usize,
    pub group_size: usize,
}

impl SweepCell {
    fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm: self.algorithm,
            eta: self.eta,
            inner_steps: self.inner_steps,
            group_size: self.group_size,
            batch_groups: match base.reuse {
                Reuse::Partition => None,
                Reuse::WithReplacement => base.batch_groups,
            },
            clip: if base.algorithm == self.algorithm {
                base.clip
            } else {
                None
            },
            seed,
            log_exact: true,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub values: Vec<f64>,
}

impl SweepRow {
    pub const TSV_HEADER: &'static str = "algorithm\teta\tK\tgroup_size\tmean\tstd\tseeds";

    pub fn stderr(&self) -> f64 {
        self.std / (self.seeds as f64).sqrt()
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.12e}\t{:.12e}\t{}",
            self.cell.algorithm,
            self.cell.eta,
            self.cell.inner_steps,
            self.cell.group_size,
            self.mean,
            self.std,
            self.seeds
        )
    }
}

/// Runs every cell of `grid` for every seed; all other training settings
/// come from `base`. Rows follow [`SweepGrid::cells`] order.
pub fn convergence_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    task: &Task,
    init: &PolicyParams,
    reference: &ReferencePolicy,
) -> Result<Vec<SweepRow>, TrainError> {
    grid.validate()?;
    if task.spaces.is_none() {
        return Err(LabError::config("sweep", "the sweep needs the enumerated trajectory spaces").into());
    }
    let cells = grid.cells();
    for cell in &cells {
        cell.config(base, grid.base_seed).validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..grid.seeds as u64).map(move |s| (c, s)))
        .collect();
    let skip = (grid.transient_fraction * base.outer_steps as f64).floor() as usize;
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cfg = cells[c].config(base, grid.base_seed.wrapping_add(s));
            let log = run(&cfg, task, init.clone(), reference)?;
            log.grad_norm_statistic(skip)
                .ok_or_else(|| LabError::config("sweep.transient_fraction", "leaves no outer steps").into())
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(cells
        .into_iter()
        .enumerate()
        .map(|(c, cell)| {
            let vals = values[c * grid.seeds..(c + 1) * grid.seeds].to_vec();
            let (mean, std) = if vals.len() > 1 {
                mean_and_std(&vals)
            } else {
                (vals[0], 0.0)
            };
            SweepRow {
                cell,
                mean,
                std,
                seeds: vals.len(),
                values: vals,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrendKind {
    /// Smaller `η` at fixed `K`, `|G|`.
    Eta,
    /// Larger `|G|` at fixed `η`, `K`.
    GroupSize,
}

/// One directional comparison: the `expected_lower` cell must not exceed
/// the other by more than `3·√(se₁² + se₂²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub kind: TrendKind,
    pub expected_lower: SweepCell,
    pub other: SweepCell,
    pub excess: f64,
    pub noise: f64,
    pub passed: bool,
}

pub fn trend_checks(rows: &[SweepRow]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    for lo in rows {
        for hi in rows {
            let (a, b) = (&lo.cell, &hi.cell);
            if a.algorithm != b.algorithm || a.inner_steps != b.inner_steps {
                continue;
            }
            let kind = if a.group_size == b.group_size && a.eta < b.eta {
                TrendKind::Eta
            } else if a.eta == b.eta && a.group_size > b.group_size {
                TrendKind::GroupSize
            } else {
                continue;
            };
            let excess = lo.mean - hi.mean;
            let noise = 3.0 * lo.stderr().hypot(hi.stderr());
            out.push(TrendCheck {
                kind,
                expected_lower: *a,
                other: *b,
                excess,
                noise,
                passed: excess <= noise,
            });
        }
    }
    out
}

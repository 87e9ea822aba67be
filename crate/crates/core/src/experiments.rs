//! The four experiment recipes behind the command line: training, the
//! estimator bias study, decomposition dumps and the convergence sweep.
//!
//! Every recipe writes only inside its run directory: a frozen copy of the
//! resolved config (`config.toml`), newline-delimited JSON records and
//! tab-separated tables. Each returns a one-line JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::RunConfigFile;
use crate::error::LabError;
use crate::group::{group_population_stats, Group};
use crate::objectives::{decompose_grpo, decompose_tic, estimate_gradient, ClipConfig, EstimatorSpec};
use crate::oracle::{
    convergence_sweep, estimator_bias_study, trend_checks, BiasStudySetup, SweepRow, TrendCheck, TrendKind,
};
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::stats::{distance, norm};
use crate::trainer::{minibatch_indices, run, sample_batch, selection_rng, Algorithm, RunLog, TrainError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    BiasStudy,
    Decompose,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::BiasStudy => "bias-study",
            Command::Decompose => "decompose",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric abort at outer step {n}, inner step {k}; partial log in {run_dir}")]
    NumericAbort { n: usize, k: usize, run_dir: PathBuf },
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for numeric aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Lab(LabError::Config { .. } | LabError::Budget { .. } | LabError::Degenerate(_)) => 2,
            ExperimentError::NumericAbort { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub summary: Value,
}

/// `<root>/<command>-<config stem>-seed<seed>`.
pub fn default_run_dir(root: &Path, command: Command, config_path: &Path, seed: u64) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".into());
    root.join(format!("{}-{stem}-seed{seed}", command.name()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))
}

fn prepare(cfg: &RunConfigFile, run_dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write(run_dir, "config.toml", &cfg.resolved().to_toml_string())
}

#[derive(Serialize)]
struct Line<'a, T: Serialize> {
    schema_version: u32,
    kind: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

fn jsonl<T: Serialize>(out: &mut String, kind: &str, record: &T) {
    let line = Line {
        schema_version: SCHEMA_VERSION,
        kind,
        record,
    };
    out.push_str(&serde_json::to_string(&line).expect("records serialize"));
    out.push('\n');
}

fn metrics_text(log: &RunLog) -> String {
    let mut out = String::new();
    let mut inner = log.inner.iter().peekable();
    for outer in &log.outer {
        jsonl(&mut out, "outer", outer);
        while let Some(rec) = inner.next_if(|r| r.n == outer.n) {
            jsonl(&mut out, "inner", rec);
        }
    }
    for rec in inner {
        jsonl(&mut out, "inner", rec);
    }
    if let Some(abort) = &log.abort {
        jsonl(&mut out, "abort", abort);
    }
    jsonl(&mut out, "final", &json!({ "j": log.final_j }));
    out
}

fn params_json(params: &PolicyParams) -> String {
    serde_json::to_string(params.as_slice()).expect("finite parameters serialize") + "\n"
}

pub fn cmd_train(cfg: &RunConfigFile, run_dir: &Path) -> Result<Outcome, ExperimentError> {
    prepare(cfg, run_dir)?;
    let task = cfg.task.build(&cfg.reward, cfg.train.log_exact)?;
    let init = cfg.task.init_params(&task.layout)?;
    let reference = ReferencePolicy::new(init.clone());
    let (log, abort) = match run(&cfg.train, &task, init, &reference) {
        Ok(log) => (log, None),
        Err(TrainError::NumericAbort { n, k, log }) => (*log, Some((n, k))),
        Err(TrainError::Lab(e)) => return Err(e.into()),
    };
    write(run_dir, "metrics.jsonl", &metrics_text(&log))?;
    write(run_dir, "final_params.json", &params_json(&log.final_params))?;
    if let Some((n, k)) = abort {
        return Err(ExperimentError::NumericAbort {
            n,
            k,
            run_dir: run_dir.to_path_buf(),
        });
    }
    let summary = json!({
        "command": Command::Train.name(),
        "run_dir": run_dir,
        "algorithm": cfg.train.algorithm,
        "outer_steps": cfg.train.outer_steps,
        "final_j": log.final_j,
        "mean_grad_norm_sq": log.grad_norm_statistic(0),
    });
    Ok(Outcome {
        run_dir: run_dir.to_path_buf(),
        summary,
    })
}

#[derive(Serialize)]
struct BiasRow<'a> {
    pair: usize,
    estimator: Algorithm,
    #[serde(flatten)]
    study: &'a crate::oracle::BiasStudy,
}

fn bias_spec(alg: Algorithm, cfg: &RunConfigFile) -> EstimatorSpec {
    let spec = match alg {
        Algorithm::Grpo => EstimatorSpec::grpo(ClipConfig::disabled()),
        Algorithm::TicGrpo => EstimatorSpec::tic(ClipConfig::disabled()),
        Algorithm::Ablation => EstimatorSpec::ablation(),
    };
    spec.with_length_norm(cfg.train.length_norm)
}

pub fn cmd_bias_study(cfg: &RunConfigFile, run_dir: &Path) -> Result<Outcome, ExperimentError> {
    prepare(cfg, run_dir)?;
    let bs = &cfg.bias_study;
    let task = cfg.task.build(&cfg.reward, true)?;
    let spaces = task.spaces.as_ref().expect("built with exact spaces");
    let setup = BiasStudySetup {
        space: &spaces[0],
        reward: &task.reward,
        group_size: bs.group_size,
        delta: bs.delta,
        sigma_samples: bs.sigma_samples,
    };
    let mut table =
        String::from("pair\testimator\tz_current\tz_old\tseparation\tlead_z_current\tlead_z_old\tsigma_bar\tsamples\n");
    let mut records = String::new();
    let mut summary_rows = Vec::new();
    for pair in 0..bs.pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(bs.seed);
        rng.set_stream(pair as u64);
        let theta_old = PolicyParams::random(task.layout.clone(), bs.theta_old_scale, &mut rng);
        let offset = PolicyParams::random(task.layout.clone(), bs.drift, &mut rng);
        let mut theta = theta_old.clone();
        theta.add_scaled(1.0, offset.as_slice());
        for (e, &alg) in bs.estimators.iter().enumerate() {
            let mut study_rng = ChaCha8Rng::seed_from_u64(bs.seed ^ (e as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            study_rng.set_stream(pair as u64);
            let study = estimator_bias_study(
                &setup,
                &theta,
                &theta_old,
                &bias_spec(alg, cfg),
                bs.samples,
                &mut study_rng,
            )?;
            let lead = study.lead.as_ref();
            table.push_str(&format!(
                "{pair}\t{alg}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.8e}\t{}\n",
                study.z_current,
                study.z_old,
                study.separation,
                lead.map_or(f64::NAN, |l| l.z_current),
                lead.map_or(f64::NAN, |l| l.z_old),
                study.sigma_bar,
                study.samples
            ));
            jsonl(
                &mut records,
                "bias-study",
                &BiasRow {
                    pair,
                    estimator: alg,
                    study: &study,
                },
            );
            summary_rows.push(json!({
                "pair": pair,
                "estimator": alg,
                "z_current": study.z_current,
                "z_old": study.z_old,
                "separated": study.separated(bs.separation_threshold),
            }));
        }
    }
    write(run_dir, "bias_study.tsv", &table)?;
    write(run_dir, "bias_study.jsonl", &records)?;
    Ok(Outcome {
        run_dir: run_dir.to_path_buf(),
        summary: json!({
            "command": Command::BiasStudy.name(),
            "run_dir": run_dir,
            "rows": summary_rows,
        }),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DecomposeStep {
    pub j: usize,
    /// `‖θ − θ_old‖`.
    pub drift: f64,
    /// Mean norm of each term over the groups of the batch.
    pub term_norms: Vec<(String, f64)>,
    pub max_residual: f64,
    pub all_exact: bool,
}

/// Decomposes every group of one outer batch at `θ_old` and after each of
/// the `K` inner updates.
pub fn decomposition_schedule(cfg: &RunConfigFile) -> Result<Vec<DecomposeStep>, ExperimentError> {
    let train = &cfg.train;
    if train.algorithm == Algorithm::Ablation {
        return Err(LabError::config("train.algorithm", "decompose supports grpo and tic-grpo").into());
    }
    let task = cfg.task.build(&cfg.reward, true)?;
    let init = cfg.task.init_params(&task.layout)?;
    let reference = ReferencePolicy::new(init.clone());
    let theta_old = if cfg.decompose.warmup_outer_steps > 0 {
        let warm = crate::trainer::TrainConfig {
            outer_steps: cfg.decompose.warmup_outer_steps,
            log_exact: false,
            ..train.clone()
        };
        match run(&warm, &task, init, &reference) {
            Ok(log) => log.final_params,
            Err(TrainError::NumericAbort { n, k, .. }) => {
                return Err(ExperimentError::NumericAbort {
                    n,
                    k,
                    run_dir: PathBuf::new(),
                })
            }
            Err(TrainError::Lab(e)) => return Err(e.into()),
        }
    } else {
        init
    };
    let n = cfg.decompose.warmup_outer_steps;
    let spec = train.estimator();
    let spaces = task.spaces.as_ref().expect("built with exact spaces");
    let mut stats_rng = ChaCha8Rng::seed_from_u64(train.seed);
    stats_rng.set_stream(u64::MAX);
    let stats = spaces
        .iter()
        .map(|s| {
            group_population_stats(
                &theta_old,
                s,
                &task.reward,
                train.group_size,
                cfg.decompose.sigma_samples,
                &mut stats_rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let groups: Vec<Group> = sample_batch(train, &task, &theta_old, n)?;
    let prompt_of = |g: &Group| g.trajectories()[0].sequence.prompt();

    let mut theta = theta_old.clone();
    let mut select = selection_rng(train.seed, n);
    let mut steps = Vec::with_capacity(train.inner_steps + 1);
    for j in 0..=train.inner_steps {
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut max_residual: f64 = 0.0;
        let mut all_exact = true;
        for group in &groups {
            let st = &stats[prompt_of(group)];
            let report = match train.algorithm {
                Algorithm::Grpo => decompose_grpo(&theta, &theta_old, group, &spec, st)?,
                _ => decompose_tic(&theta, &theta_old, group, &spec, st)?,
            };
            max_residual = max_residual.max(report.residual);
            all_exact &= report.is_exact();
            let named = std::iter::once(("whole", report.whole.as_slice())).chain(report.terms());
            for (i, (name, term)) in named.enumerate() {
                if sums.len() <= i {
                    sums.push((name.to_string(), 0.0));
                }
                sums[i].1 += norm(term);
            }
        }
        let count = groups.len() as f64;
        sums.iter_mut().for_each(|(_, v)| *v /= count);
        steps.push(DecomposeStep {
            j,
            drift: distance(theta.as_slice(), theta_old.as_slice()),
            term_norms: sums,
            max_residual,
            all_exact,
        });
        if j < train.inner_steps {
            let idx = minibatch_indices(train, j, groups.len(), &mut select);
            let mini: Vec<Group> = idx.iter().map(|&i| groups[i].clone()).collect();
            let est = estimate_gradient(&theta, &theta_old, &mini, &spec, &reference)?;
            theta.add_scaled(train.eta, &est.vector);
        }
    }
    Ok(steps)
}

pub fn cmd_decompose(cfg: &RunConfigFile, run_dir: &Path) -> Result<Outcome, ExperimentError> {
    prepare(cfg, run_dir)?;
    let steps = match decomposition_schedule(cfg) {
        Err(ExperimentError::NumericAbort { n, k, .. }) => {
            return Err(ExperimentError::NumericAbort {
                n,
                k,
                run_dir: run_dir.to_path_buf(),
            })
        }
        other => other?,
    };
    let mut table = String::from("j\tdrift\tterm\tmean_norm\n");
    let mut records = String::new();
    for step in &steps {
        for (name, v) in &step.term_norms {
            table.push_str(&format!("{}\t{:.12e}\t{name}\t{v:.12e}\n", step.j, step.drift));
        }
        jsonl(&mut records, "decompose", step);
    }
    write(run_dir, "decompose.tsv", &table)?;
    write(run_dir, "decompose.jsonl", &records)?;
    let max_residual = steps.iter().map(|s| s.max_residual).fold(0.0, f64::max);
    Ok(Outcome {
        run_dir: run_dir.to_path_buf(),
        summary: json!({
            "command": Command::Decompose.name(),
            "run_dir": run_dir,
            "steps": steps.len(),
            "max_drift": steps.last().map(|s| s.drift),
            "max_residual": max_residual,
            "all_exact": steps.iter().all(|s| s.all_exact),
        }),
    })
}

pub const TREND_TSV_HEADER: &str =
    "kind\talgorithm\tK\tlower_eta\tlower_group_size\tother_eta\tother_group_size\texcess\tnoise\tpassed";

pub fn trend_tsv_line(c: &TrendCheck) -> String {
    let kind = match c.kind {
        TrendKind::Eta => "eta",
        TrendKind::GroupSize => "group-size",
    };
    format!(
        "{kind}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{}",
        c.expected_lower.algorithm,
        c.expected_lower.inner_steps,
        c.expected_lower.eta,
        c.expected_lower.group_size,
        c.other.eta,
        c.other.group_size,
        c.excess,
        c.noise,
        c.passed
    )
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SweepRow::TSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.tsv_line());
        out.push('\n');
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfigFile, run_dir: &Path) -> Result<Outcome, ExperimentError> {
    prepare(cfg, run_dir)?;
    let task = cfg.task.build(&cfg.reward, true)?;
    let init = cfg.task.init_params(&task.layout)?;
    let reference = ReferencePolicy::new(init.clone());
    let rows = match convergence_sweep(&cfg.sweep, &cfg.train, &task, &init, &reference) {
        Ok(rows) => rows,
        Err(TrainError::NumericAbort { n, k, .. }) => {
            return Err(ExperimentError::NumericAbort {
                n,
                k,
                run_dir: run_dir.to_path_buf(),
            })
        }
        Err(TrainError::Lab(e)) => return Err(e.into()),
    };
    let checks = trend_checks(&rows);
    write(run_dir, "sweep.tsv", &sweep_tsv(&rows))?;
    let mut trend = String::from(TREND_TSV_HEADER);
    trend.push('\n');
    for c in &checks {
        trend.push_str(&trend_tsv_line(c));
        trend.push('\n');
    }
    write(run_dir, "trend_checks.tsv", &trend)?;
    let passed = checks.iter().filter(|c| c.passed).count();
    Ok(Outcome {
        run_dir: run_dir.to_path_buf(),
        summary: json!({
            "command": Command::Sweep.name(),
            "run_dir": run_dir,
            "cells": rows.len(),
            "checks": checks.len(),
            "checks_passed": passed,
            "all_passed": passed == checks.len(),
        }),
    })
}

pub fn run_command(command: Command, cfg: &RunConfigFile, run_dir: &Path) -> Result<Outcome, ExperimentError> {
    match command {
        Command::Train => cmd_train(cfg, run_dir),
        Command::BiasStudy => cmd_bias_study(cfg, run_dir),
        Command::Decompose => cmd_decompose(cfg, run_dir),
        Command::Sweep => cmd_sweep(cfg, run_dir),
    }
}

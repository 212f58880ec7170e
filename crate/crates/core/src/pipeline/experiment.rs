use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalResult, Model, VocabularyMode};
use super::train::{train_few_shot, TrainConfig, TrainOutcome};
use crate::adapter::AdapterConfig;
use crate::config::RunConfig;
use crate::datagen::{make_split, Benchmark};
use crate::error::Result;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub lr: f64,
    pub adapter_hash: String,
    pub initial_j_total: f64,
    pub final_j_total: f64,
    pub untrained_ood_only: EvalResult,
    pub untrained_composite: EvalResult,
    pub trained_ood_only: EvalResult,
    pub trained_composite: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub untrained_ood_top1: Stats,
    pub untrained_sc_top1: Stats,
    pub untrained_composite_top1: Stats,
    pub ood_top1: Stats,
    pub sc_top1: Stats,
    pub composite_top1: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub k: usize,
    pub backbone_hash: String,
    /// Every effective setting of the run.
    pub config: RunConfig,
    pub seeds: Vec<SeedReport>,
    pub summary: Summary,
}

/// Evaluation of one trained seed in both vocabulary modes, next to the
/// frozen baseline on the same split.
pub fn run_seed(
    benchmark: &Benchmark,
    train: &TrainConfig,
    adapter: &AdapterConfig,
    seed: u64,
) -> Result<(SeedReport, TrainOutcome)> {
    let split = make_split(benchmark, train.k, seed)?;
    let outcome = train_few_shot(benchmark, &split, train, adapter, seed)?;
    let model = Model::Adapted {
        params: &outcome.params,
        flags: &train.ablation_flags,
        difficulty_mode: train.difficulty_mode,
    };
    let report = SeedReport {
        seed,
        lr: outcome.lr,
        adapter_hash: outcome.params.content_hash(),
        initial_j_total: outcome.log.first().map_or(f64::NAN, |b| b.j_total),
        final_j_total: outcome.log.last().map_or(f64::NAN, |b| b.j_total),
        untrained_ood_only: evaluate(benchmark, &split, Model::Frozen, VocabularyMode::OodOnly)?,
        untrained_composite: evaluate(benchmark, &split, Model::Frozen, VocabularyMode::Composite)?,
        trained_ood_only: evaluate(benchmark, &split, model, VocabularyMode::OodOnly)?,
        trained_composite: evaluate(benchmark, &split, model, VocabularyMode::Composite)?,
    };
    Ok((report, outcome))
}

pub fn summarize(seeds: &[SeedReport]) -> Summary {
    let s = |f: &dyn Fn(&SeedReport) -> f64| Stats::of(&seeds.iter().map(f).collect::<Vec<_>>());
    Summary {
        untrained_ood_top1: s(&|r| r.untrained_ood_only.top1),
        untrained_sc_top1: s(&|r| r.untrained_composite.sc_top1.unwrap_or(f64::NAN)),
        untrained_composite_top1: s(&|r| r.untrained_composite.top1),
        ood_top1: s(&|r| r.trained_ood_only.top1),
        sc_top1: s(&|r| r.trained_composite.sc_top1.unwrap_or(f64::NAN)),
        composite_top1: s(&|r| r.trained_composite.top1),
    }
}

/// Trains and evaluates every configured seed, in seed order.
pub fn run_experiment(benchmark: &Benchmark, cfg: &RunConfig) -> Result<(RunReport, Vec<TrainOutcome>)> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut outcomes = Vec::new();
    for &seed in &cfg.train.seeds {
        let (r, o) = run_seed(benchmark, &cfg.train, &cfg.adapter, seed)?;
        log::info!(
            "seed {seed}: ood {:.3} composite {:.3} (loss {:.4} -> {:.4})",
            r.trained_ood_only.top1,
            r.trained_composite.top1,
            r.initial_j_total,
            r.final_j_total
        );
        reports.push(r);
        outcomes.push(o);
    }
    let summary = summarize(&reports);
    Ok((
        RunReport {
            format_version: REPORT_FORMAT_VERSION,
            k: cfg.train.k,
            backbone_hash: benchmark.encoders.content_hash(),
            config: cfg.clone(),
            seeds: reports,
            summary,
        },
        outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRow {
    pub k: usize,
    pub ood: Stats,
    pub composite: Stats,
    pub untrained_ood: Stats,
}

pub const SHOTS_CSV_HEADER: &str = "k,ood_mean,ood_std,composite_mean,composite_std,untrained_ood_mean,n_seeds";

/// OOD and composite accuracy for each shot count, over the training seeds.
pub fn shots_curve(benchmark: &Benchmark, cfg: &RunConfig, shots: &[usize]) -> Result<Vec<ShotRow>> {
    shots
        .iter()
        .map(|&k| {
            let train = TrainConfig { k, ..cfg.train.clone() };
            let mut rows = Vec::new();
            for &seed in &train.seeds {
                rows.push(run_seed(benchmark, &train, &cfg.adapter, seed)?.0);
            }
            let s = summarize(&rows);
            Ok(ShotRow {
                k,
                ood: s.ood_top1,
                composite: s.composite_top1,
                untrained_ood: s.untrained_ood_top1,
            })
        })
        .collect()
}

pub fn shots_csv(rows: &[ShotRow]) -> String {
    let mut s = format!("{SHOTS_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.k, r.ood.mean, r.ood.std, r.composite.mean, r.composite.std, r.untrained_ood.mean, r.ood.n
        ));
    }
    s
}

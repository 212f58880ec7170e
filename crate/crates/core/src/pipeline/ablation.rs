use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{run_seed, SeedReport, Stats};
use super::train::TrainConfig;
use crate::adapter::AdapterConfig;
use crate::agents::{Ablation, AblationFlags};
use crate::datagen::Benchmark;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flag: Option<Ablation>,
    pub composite: Stats,
    pub ood: Stats,
    pub sc: Stats,
    /// Mean composite accuracy minus the full system's.
    pub drop: f64,
}

pub fn variant_label(flag: Option<Ablation>) -> &'static str {
    match flag {
        None => "Full SynerNet",
        Some(Ablation::NoVisual) => "w/o Visual Unit",
        Some(Ablation::NoLing) => "w/o Ling. Unit",
        Some(Ablation::NoNom) => "w/o Nom. Unit",
        Some(Ablation::NoCoord) => "w/o Coord. Unit",
        Some(Ablation::NoCtxExch) => "w/o Ctx Exch.",
        Some(Ablation::SimpleConcat) => "Simple Concat",
        Some(Ablation::NoDiff) => "w/o Diff. Assess.",
        Some(Ablation::NoDynbal) => "w/o Dyn. Bal.",
    }
}

/// The nine variants in table order: the full system, then one per flag.
pub fn variants() -> Vec<Option<Ablation>> {
    std::iter::once(None).chain(Ablation::ALL.map(Some)).collect()
}

/// Trains every variant on every seed, fanning out over worker threads.
/// Each job owns its bus, agents and parameters.
pub fn run_ablation(
    benchmark: &Benchmark,
    train: &TrainConfig,
    adapter: &AdapterConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Option<Ablation>, u64)> = variants()
        .into_iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<SeedReport> = jobs
        .par_iter()
        .map(|&(flag, seed)| {
            let flags = flag.map_or_else(AblationFlags::none, |f| AblationFlags::none().with(f));
            let cfg = TrainConfig {
                ablation_flags: flags,
                ..train.clone()
            };
            run_seed(benchmark, &cfg, adapter, seed).map(|r| r.0)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<AblationRow> = variants()
        .into_iter()
        .enumerate()
        .map(|(i, flag)| {
            let runs = &results[i * seeds.len()..(i + 1) * seeds.len()];
            let col = |f: &dyn Fn(&SeedReport) -> f64| Stats::of(&runs.iter().map(f).collect::<Vec<_>>());
            AblationRow {
                variant: variant_label(flag).to_owned(),
                flag,
                composite: col(&|r| r.trained_composite.top1),
                ood: col(&|r| r.trained_ood_only.top1),
                sc: col(&|r| r.trained_composite.sc_top1.unwrap_or(0.0)),
                drop: 0.0,
            }
        })
        .collect();
    let full = rows[0].composite.mean;
    for r in &mut rows {
        r.drop = r.composite.mean - full;
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,flag,composite_mean,composite_std,drop,ood_mean,ood_std,sc_mean,sc_std,n_seeds";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.variant,
            r.flag.map_or("NONE", Ablation::as_str),
            r.composite.mean,
            r.composite.std,
            r.drop,
            r.ood.mean,
            r.ood.std,
            r.sc.mean,
            r.sc.std,
            r.composite.n
        ));
    }
    s
}

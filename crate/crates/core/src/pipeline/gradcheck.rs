use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::train::{loss_and_grad, TrainBatch};
use crate::adapter::AdapterParams;
use crate::agents::{AblationFlags, AgentStates, DifficultyMode};
use crate::datagen::Benchmark;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const MAX_CHECK_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub n: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    /// Central difference of the loss with respect to the residual
    /// coefficient, which must carry no gradient.
    pub residual_fd_grad: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failing_groups(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_err < self.tolerance))
            .map(|g| g.group.clone())
            .collect()
    }

    pub fn into_result(self) -> Result<Self> {
        let failing = self.failing_groups();
        if failing.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradientCheck(failing))
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Moves every parameter off its initial value (zero output layers, clip
/// boundaries) so that every group has a generic, nonzero gradient.
pub fn jitter(params: &AdapterParams, seed: u64) -> Result<AdapterParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C4E_C4E0);
    let noise = Normal::new(0.0, 0.1).expect("positive scale");
    let flat: Vec<f64> = params.to_flat().into_iter().map(|v| v + noise.sample(&mut rng)).collect();
    let mut p = params.from_flat_like(&flat)?;
    p.coordinator.kappa_param = 0.8;
    p.coordinator.w_con_param = 1.3;
    p.coordinator.w_cls_param = 0.6;
    Ok(p)
}

fn loss_at(
    batch: &TrainBatch,
    benchmark: &Benchmark,
    params: &AdapterParams,
    flags: &AblationFlags,
    mode: DifficultyMode,
) -> Result<f64> {
    Ok(loss_and_grad(batch, benchmark, params, flags, mode, 0, &AgentStates::default())?
        .bundle
        .j_total)
}

/// Compares the analytic gradient of the total loss with central finite
/// differences for every trainable scalar, on at most eight images.
pub fn grad_check(
    benchmark: &Benchmark,
    batch: &TrainBatch,
    params: &AdapterParams,
    flags: &AblationFlags,
    mode: DifficultyMode,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let shots = (MAX_CHECK_BATCH / batch.ood_names.len().max(1)).max(1);
    let batch = batch.truncated(shots);
    if batch.features.len() > MAX_CHECK_BATCH {
        return Err(Error::InvalidConfig(format!(
            "gradient check batch has {} images, at most {MAX_CHECK_BATCH} allowed",
            batch.features.len()
        )));
    }
    let analytic = loss_and_grad(&batch, benchmark, params, flags, mode, 0, &AgentStates::default())?.grad;
    let flat = params.to_flat();
    let mut groups = Vec::new();
    for g in params.groups() {
        let mut worst: f64 = 0.0;
        let mut biggest: f64 = 0.0;
        for i in g.range.clone() {
            let mut plus = flat.clone();
            plus[i] += FD_STEP;
            let mut minus = flat.clone();
            minus[i] -= FD_STEP;
            let fp = loss_at(&batch, benchmark, &params.from_flat_like(&plus)?, flags, mode)?;
            let fm = loss_at(&batch, benchmark, &params.from_flat_like(&minus)?, flags, mode)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
            biggest = biggest.max(analytic[i].abs());
        }
        groups.push(GroupCheck {
            group: g.name,
            n: g.range.len(),
            max_rel_err: worst,
            max_abs_grad: biggest,
        });
    }
    let mut up = params.clone();
    up.visual.beta += FD_STEP;
    let mut down = params.clone();
    down.visual.beta -= FD_STEP;
    let residual_fd_grad = (loss_at(&batch, benchmark, &up, flags, mode)? - loss_at(&batch, benchmark, &down, flags, mode)?)
        / (2.0 * FD_STEP);
    Ok(GradCheckReport {
        max_rel_err: groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max),
        groups,
        residual_fd_grad,
        tolerance,
    })
}

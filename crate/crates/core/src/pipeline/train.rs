use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::agents::{
    gc_coordinate, gc_temperature_grad, AblationFlags, AgentStates, DifficultyMode, Round, StepOutputs,
};
use crate::datagen::{Benchmark, ClassTag, DatasetSplit};
use crate::encoders::{normalize_backward, FeatureProvider};
use crate::error::{Error, Result};
use crate::messaging::{MessageBus, TraceLog};
use crate::objectives::{
    balance_weights_jacobian, classification_loss, contrastive_loss, total_loss, LossBundle,
};
use crate::optim::{cosine_lr, AdamW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    /// Candidate learning rates; when set, each seed trains once per value
    /// and keeps the one with the lowest final training loss.
    pub lr_grid: Option<Vec<f64>>,
    pub ablation_flags: AblationFlags,
    pub difficulty_mode: DifficultyMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 16,
            epochs: 200,
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            seeds: vec![0, 1, 2],
            lr_grid: None,
            ablation_flags: AblationFlags::none(),
            difficulty_mode: DifficultyMode::Literal,
        }
    }
}

pub const LR_GRID_RANGE: (f64, f64) = (1e-5, 1e-3);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::InvalidConfig(format!(
                "learning rates must satisfy 0 <= lr_min <= lr, got lr={} lr_min={}",
                self.lr, self.lr_min
            )));
        }
        if let Some(grid) = &self.lr_grid {
            if grid.is_empty() {
                return Err(Error::InvalidConfig("lr_grid is empty".into()));
            }
            if let Some(bad) = grid.iter().find(|v| !(LR_GRID_RANGE.0..=LR_GRID_RANGE.1).contains(*v)) {
                return Err(Error::InvalidConfig(format!(
                    "grid learning rate {bad} outside [{}, {}]",
                    LR_GRID_RANGE.0, LR_GRID_RANGE.1
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// The fixed training batch of one split: frozen image features arranged as
/// `K` sub-batches holding one image of every OOD class.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub ood_names: Vec<String>,
    pub features: Vec<DVector<f64>>,
    /// OOD class index of each entry of `features`.
    pub labels: Vec<usize>,
    /// `sub_batches[k][c]` indexes `features`.
    pub sub_batches: Vec<Vec<usize>>,
}

impl TrainBatch {
    pub fn new(benchmark: &Benchmark, split: &DatasetSplit) -> Result<Self> {
        let ood = benchmark.class_indices(ClassTag::Ood);
        let ood_index: BTreeMap<usize, usize> = ood.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ood.len()];
        for &(id, c) in &split.train {
            let &i = ood_index
                .get(&c)
                .ok_or_else(|| Error::InvalidConfig(format!("training sample {id} is not from an OOD class")))?;
            per_class[i].push(id);
        }
        if per_class.iter().any(|ids| ids.len() != split.k) {
            return Err(Error::InvalidConfig(format!(
                "split does not hold exactly {} shots for every OOD class",
                split.k
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut sub_batches = Vec::new();
        for k in 0..split.k {
            let mut sb = Vec::new();
            for (c, ids) in per_class.iter().enumerate() {
                sb.push(features.len());
                features.push(benchmark.image_features(ids[k])?.to_vector());
                labels.push(c);
            }
            sub_batches.push(sb);
        }
        Ok(Self {
            ood_names: benchmark.ood_names(),
            features,
            labels,
            sub_batches,
        })
    }

    /// The first `n` sub-batches only; used to keep gradient checks small.
    pub fn truncated(&self, n: usize) -> Self {
        let sub_batches: Vec<Vec<usize>> = self.sub_batches.iter().take(n).cloned().collect();
        let keep: Vec<usize> = sub_batches.iter().flatten().copied().collect();
        let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        Self {
            ood_names: self.ood_names.clone(),
            features: keep.iter().map(|&i| self.features[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            sub_batches: sub_batches
                .iter()
                .map(|sb| sb.iter().map(|i| remap[i]).collect())
                .collect(),
        }
    }
}

/// Which prompt fills column `c` of each text variant. Without exchange the
/// only variant is each concept under its own template; with exchange there
/// is one variant per template owner.
pub(crate) fn text_variants(layout: &[crate::agents::PromptMeta], n_concepts: usize) -> Result<Vec<Vec<usize>>> {
    let index: BTreeMap<(usize, usize), usize> = layout
        .iter()
        .enumerate()
        .map(|(i, p)| ((p.concept, p.owner), i))
        .collect();
    let full: Vec<Vec<usize>> = (0..n_concepts)
        .filter_map(|v| (0..n_concepts).map(|c| index.get(&(c, v)).copied()).collect())
        .collect();
    if full.len() == n_concepts && n_concepts > 1 {
        return Ok(full);
    }
    let standard = (0..n_concepts)
        .map(|c| index.get(&(c, c)).copied())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidMessage("prompt layout lacks a standard description".into()))?;
    Ok(vec![standard])
}

fn unit(v: &DVector<f64>) -> DVector<f64> {
    v / v.norm()
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub bundle: LossBundle,
    /// Gradient of `j_total` in the adapter's flat layout.
    pub grad: Vec<f64>,
    pub outputs: StepOutputs,
    pub trace: TraceLog,
}

/// One coordination round followed by the total loss and its exact gradient.
pub fn loss_and_grad(
    batch: &TrainBatch,
    benchmark: &Benchmark,
    params: &AdapterParams,
    flags: &AblationFlags,
    difficulty_mode: DifficultyMode,
    step_index: u64,
    states: &AgentStates,
) -> Result<StepResult> {
    let round = Round {
        encoders: &benchmark.encoders,
        visual: &params.visual,
        linguistic: &params.linguistic,
        names: &params.names,
        coordinator: &params.coordinator,
        flags,
        difficulty_mode,
        step_index,
    };
    let mut bus = MessageBus::with_all_agents();
    let out = gc_coordinate(&mut bus, &round, &batch.features, states)?;
    let coord = &out.coordinator;
    let n_concepts = batch.ood_names.len();
    let kappa = coord.kappa;

    // Image directions do not depend on any trainable parameter: both
    // encodings are positive rescalings of the frozen feature.
    let images: Vec<DVector<f64>> = coord.image_features.iter().map(unit).collect();
    let texts: Vec<&DVector<f64>> = out.linguistic.texts().collect();
    let text_units: Vec<DVector<f64>> = texts.iter().map(|t| unit(t)).collect();
    let variants = text_variants(&coord.layout, n_concepts)?;

    let mut j_con = 0.0;
    let mut g_kappa = 0.0;
    let mut g_text_units: Vec<DVector<f64>> = vec![DVector::zeros(images[0].len()); texts.len()];
    let n_terms = (batch.sub_batches.len() * variants.len()) as f64;
    for sb in &batch.sub_batches {
        for var in &variants {
            let s = DMatrix::from_fn(n_concepts, n_concepts, |i, j| images[sb[i]].dot(&text_units[var[j]]));
            let l = contrastive_loss(&s, kappa)?;
            j_con += l.value / n_terms;
            g_kappa += l.grad_kappa / n_terms;
            for (j, &t) in var.iter().enumerate() {
                for i in 0..n_concepts {
                    g_text_units[t] += &images[sb[i]] * (l.grad_s[(i, j)] / n_terms);
                }
            }
        }
    }

    let cls = classification_loss(&batch.features, &batch.labels, &params.head)?;
    let bundle = total_loss(j_con, cls.value, coord.w_con, coord.w_cls, kappa)
        .map_err(|e| Error::Diverged {
            step: step_index as usize,
            source: Box::new(e),
        })?;
    if !bundle.j_total.is_finite() {
        return Err(Error::Diverged {
            step: step_index as usize,
            source: Box::new(Error::NonFinite { term: "j_total" }),
        });
    }

    let grad_texts: Vec<DVector<f64>> = texts
        .iter()
        .zip(&g_text_units)
        .map(|(t, g)| normalize_backward(t, g) * coord.w_con)
        .collect();
    let ling = round.linguistic_unit();
    let (g_integrator, token_grads) = ling.backward(&out.linguistic, &grad_texts);
    let g_names = round.nominal_unit().backward(&out.nominal, &token_grads);

    let mut g = params.clone();
    g.set_flat(&vec![0.0; params.n_trainable()])?;
    g.linguistic.integrator = g_integrator;
    g.names.vectors = g_names;
    g.head = cls.grad_head * coord.w_cls;
    if flags.adaptive_temperature() {
        g.coordinator.kappa_param = coord.w_con * g_kappa * gc_temperature_grad(params.coordinator.kappa_param);
    }
    if flags.dynamic_balance() {
        let jac = balance_weights_jacobian(params.coordinator.w_con_param, params.coordinator.w_cls_param);
        g.coordinator.w_con_param = j_con * jac[0][0] + cls.value * jac[1][0];
        g.coordinator.w_cls_param = j_con * jac[0][1] + cls.value * jac[1][1];
    }

    Ok(StepResult {
        bundle,
        grad: g.to_flat(),
        outputs: out,
        trace: bus.into_trace(),
    })
}

/// Training outcome for one seed.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    pub log: Vec<LossBundle>,
    /// Message traces of the first and last rounds.
    pub traces: Vec<TraceLog>,
    pub backbone_hash: String,
    pub lr: f64,
}

impl TrainOutcome {
    pub fn training_log_csv(&self) -> String {
        let mut s = String::from(LossBundle::CSV_HEADER);
        s.push('\n');
        for (i, b) in self.log.iter().enumerate() {
            s.push_str(&b.csv_row(i));
            s.push('\n');
        }
        s
    }
}

fn train_once(
    benchmark: &Benchmark,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    adapter_cfg: &AdapterConfig,
    seed: u64,
    lr: f64,
) -> Result<TrainOutcome> {
    let flags = &cfg.ablation_flags;
    let before = benchmark.encoders.content_hash();
    let mut params = AdapterParams::init(&benchmark.encoders, &batch.ood_names, adapter_cfg, flags, seed)?;
    let decay = params.groups().into_iter().filter(|g| g.decay).map(|g| g.range);
    let mut opt = AdamW::new(params.n_trainable(), cfg.weight_decay, decay);
    let mut states = AgentStates::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut traces = Vec::new();
    let mut flat = params.to_flat();
    for step in 0..cfg.epochs {
        let res = loss_and_grad(batch, benchmark, &params, flags, cfg.difficulty_mode, step as u64, &states)?;
        log.push(res.bundle);
        if step == 0 || step + 1 == cfg.epochs {
            traces.push(res.trace);
        }
        states = res.outputs.states;
        params.eval_context = res.outputs.linguistic.context;
        opt.step(&mut flat, &res.grad, cosine_lr(step, cfg.epochs, lr, cfg.lr_min.min(lr)));
        params.set_flat(&flat)?;
    }
    let after = benchmark.encoders.content_hash();
    if before != after {
        return Err(Error::BackboneChanged { before, after });
    }
    Ok(TrainOutcome {
        params,
        log,
        traces,
        backbone_hash: after,
        lr,
    })
}

/// Full-batch AdamW training of the adapter on one split.
pub fn train_few_shot(
    benchmark: &Benchmark,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    adapter_cfg: &AdapterConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.k != cfg.k {
        return Err(Error::InvalidConfig(format!(
            "split has K={} but the config asks for K={}",
            split.k, cfg.k
        )));
    }
    let batch = TrainBatch::new(benchmark, split)?;
    let Some(grid) = &cfg.lr_grid else {
        return train_once(benchmark, &batch, cfg, adapter_cfg, seed, cfg.lr);
    };
    let mut best: Option<TrainOutcome> = None;
    for &lr in grid {
        let run = train_once(benchmark, &batch, cfg, adapter_cfg, seed, lr)?;
        let loss = run.log.last().map_or(f64::INFINITY, |b| b.j_total);
        if best
            .as_ref()
            .is_none_or(|b| loss < b.log.last().map_or(f64::INFINITY, |x| x.j_total))
        {
            best = Some(run);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

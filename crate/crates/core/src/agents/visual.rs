//! Visual perception unit: robust encoding, difficulty estimation and the
//! three-level strategy choice.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentMemory};
use crate::encoders::{gaussian_matrix, normalize_backward, Embedding, FrozenEncoders, Modality};
use crate::error::{Error, Result};
use crate::messaging::{AgentId, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Standard,
    Robust,
    /// Robust encoding plus context-exchange augmentation on the text side.
    RobustAugmented,
}

impl Strategy {
    pub fn encoding_mode(self) -> EncodingMode {
        match self {
            Strategy::Standard => EncodingMode::Standard,
            Strategy::Robust | Strategy::RobustAugmented => EncodingMode::Robust,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingMode {
    Standard,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyMode {
    /// One score from the batch-mean feature, broadcast to every sample.
    #[default]
    Literal,
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualUnitParams {
    pub beta: f64,
    pub theta1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub theta2: DMatrix<f64>,
    pub b2: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
}

impl VisualUnitParams {
    /// Small random difficulty head. `b2` sets the prior difficulty level:
    /// with near-zero hidden activations, `sigmoid(b2)` is the initial score.
    pub fn init(d_embed: usize, hidden: usize, beta: f64, b2: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            beta,
            theta1: gaussian_matrix(rng, hidden, d_embed, 0.1),
            b1: DVector::zeros(hidden),
            theta2: gaussian_matrix(rng, 1, hidden, 0.1),
            b2,
            tau_lo: 0.33,
            tau_hi: 0.66,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(0.0 < self.tau_lo && self.tau_lo < self.tau_hi && self.tau_hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "thresholds ({}, {}) must satisfy 0 < lo < hi < 1",
                self.tau_lo, self.tau_hi
            )));
        }
        Ok(())
    }
}

/// `Φ_std(e) = e`, `Φ_rob(e) = e/‖e‖ + β·detach(e)`.
pub fn vpu_encode(e: &DVector<f64>, mode: EncodingMode, beta: f64) -> Result<DVector<f64>> {
    match mode {
        EncodingMode::Standard => Ok(e.clone()),
        EncodingMode::Robust => {
            let n = e.norm();
            if n == 0.0 {
                return Err(Error::DegenerateFeature);
            }
            Ok(e / n + e * beta)
        }
    }
}

/// Encodes a raw sample through the frozen visual encoder first.
pub fn vpu_encode_raw(
    encoders: &FrozenEncoders,
    z: &[f64],
    mode: EncodingMode,
    params: &VisualUnitParams,
) -> Result<Embedding> {
    let e = encoders.encode_image(z)?.to_vector();
    let out = vpu_encode(&e, mode, params.beta)?;
    Ok(Embedding::from_vector(&out, Modality::Visual, false))
}

/// Vector-Jacobian product of [`vpu_encode`]. The residual term is detached,
/// so in robust mode only the normalization contributes.
pub fn vpu_encode_backward(e: &DVector<f64>, mode: EncodingMode, grad_out: &DVector<f64>) -> DVector<f64> {
    match mode {
        EncodingMode::Standard => grad_out.clone(),
        EncodingMode::Robust => normalize_backward(e, grad_out),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn difficulty_of(e: &DVector<f64>, p: &VisualUnitParams) -> f64 {
    let hidden = (&p.theta1 * e + &p.b1).map(|x| x.max(0.0));
    sigmoid((&p.theta2 * hidden)[0] + p.b2)
}

/// `δ = σ(Θ₂·ReLU(Θ₁·ē + b₁) + b₂)`, one score per sample.
pub fn estimate_difficulty(
    features: &[DVector<f64>],
    params: &VisualUnitParams,
    mode: DifficultyMode,
) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::InvalidConfig("difficulty of an empty batch".into()));
    }
    Ok(match mode {
        DifficultyMode::Literal => {
            let d = difficulty_of(&batch_mean(features), params);
            vec![d; features.len()]
        }
        DifficultyMode::PerSample => features.iter().map(|e| difficulty_of(e, params)).collect(),
    })
}

pub fn select_strategy(delta: f64, tau_lo: f64, tau_hi: f64) -> Strategy {
    if delta < tau_lo {
        Strategy::Standard
    } else if delta < tau_hi {
        Strategy::Robust
    } else {
        Strategy::RobustAugmented
    }
}

pub(crate) fn batch_mean(v: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(v[0].len());
    for x in v {
        m += x;
    }
    m / v.len() as f64
}

pub struct VisualUnit<'a> {
    pub params: &'a VisualUnitParams,
    pub difficulty_mode: DifficultyMode,
    /// Bypasses difficulty assessment with a fixed strategy.
    pub pinned: Option<Strategy>,
    pub emit_context: bool,
}

#[derive(Debug, Clone)]
pub struct VisualInput {
    /// Frozen encoder outputs `E_v(z)` for the batch.
    pub features: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct VisualOutput {
    /// Batch-level strategy: the most demanding level among the samples.
    pub strategy: Strategy,
    pub difficulty: f64,
    pub per_sample: Vec<Strategy>,
    pub encoded: Vec<DVector<f64>>,
    /// Mean of the L2-normalized encoded features.
    pub context: DVector<f64>,
    pub outbox: Vec<(AgentId, Payload)>,
}

impl VisualUnit<'_> {
    pub fn process(&self, features: &[DVector<f64>]) -> Result<(Strategy, f64, Vec<Strategy>, Vec<DVector<f64>>)> {
        // A pinned strategy still reports the score it overrides.
        let scores = estimate_difficulty(features, self.params, self.difficulty_mode)?;
        let difficulty = scores.iter().sum::<f64>() / scores.len() as f64;
        let per_sample: Vec<Strategy> = match self.pinned {
            Some(s) => vec![s; features.len()],
            None => scores
                .iter()
                .map(|&d| select_strategy(d, self.params.tau_lo, self.params.tau_hi))
                .collect(),
        };
        let strategy = per_sample.iter().copied().max().unwrap_or(Strategy::Standard);
        let encoded = features
            .iter()
            .zip(&per_sample)
            .map(|(e, s)| vpu_encode(e, s.encoding_mode(), self.params.beta))
            .collect::<Result<Vec<_>>>()?;
        Ok((strategy, difficulty, per_sample, encoded))
    }
}

impl Agent for VisualUnit<'_> {
    type Input = VisualInput;
    type Output = VisualOutput;

    fn id(&self) -> AgentId {
        AgentId::Visual
    }

    fn run(&self, input: &VisualInput, memory: &AgentMemory) -> Result<(VisualOutput, AgentMemory)> {
        let (strategy, difficulty, per_sample, encoded) = self.process(&input.features)?;
        let units: Vec<DVector<f64>> = encoded
            .iter()
            .map(|x| {
                let n = x.norm();
                if n == 0.0 {
                    Err(Error::DegenerateFeature)
                } else {
                    Ok(x / n)
                }
            })
            .collect::<Result<_>>()?;
        let context = batch_mean(&units);

        let strategy_msg = Payload::Strategy {
            strategy,
            difficulty,
        };
        let mut outbox = Vec::with_capacity(4);
        if self.emit_context {
            outbox.push((
                AgentId::Linguistic,
                Payload::Context(Embedding::from_vector(&context, Modality::Visual, false)),
            ));
        }
        outbox.push((AgentId::Nominal, strategy_msg.clone()));
        outbox.push((AgentId::Coordinator, strategy_msg));
        outbox.push((
            AgentId::Coordinator,
            Payload::Features(
                encoded
                    .iter()
                    .map(|x| Embedding::from_vector(x, Modality::Visual, false))
                    .collect(),
            ),
        ));

        let feature_mean = batch_mean(&input.features);
        let memory = match memory {
            AgentMemory::Visual {
                running_mean,
                batches,
            } => {
                let n = *batches as f64;
                let updated = if running_mean.is_empty() {
                    feature_mean.as_slice().to_vec()
                } else {
                    running_mean
                        .iter()
                        .zip(feature_mean.iter())
                        .map(|(m, x)| (m * n + x) / (n + 1.0))
                        .collect()
                };
                AgentMemory::Visual {
                    running_mean: updated,
                    batches: batches + 1,
                }
            }
            _ => AgentMemory::initial(AgentId::Visual),
        };

        Ok((
            VisualOutput {
                strategy,
                difficulty,
                per_sample,
                encoded,
                context,
                outbox,
            },
            memory,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentState;
    use rand::SeedableRng;

    fn params() -> VisualUnitParams {
        VisualUnitParams::init(4, 4, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn robust_encoding_hand_example() {
        let e = DVector::from_vec(vec![3.0, 4.0]);
        let out = vpu_encode(&e, EncodingMode::Robust, 0.5).unwrap();
        assert!((out[0] - 2.1).abs() < 1e-12 && (out[1] - 2.8).abs() < 1e-12);
        let unit = vpu_encode(&e, EncodingMode::Robust, 0.0).unwrap();
        assert!((unit.norm() - 1.0).abs() < 1e-12);
        assert_eq!(vpu_encode(&e, EncodingMode::Standard, 0.5).unwrap(), e);
        assert!(matches!(
            vpu_encode(&DVector::zeros(2), EncodingMode::Robust, 0.5),
            Err(Error::DegenerateFeature)
        ));
    }

    #[test]
    fn robust_jacobian_excludes_detached_residual() {
        let e = DVector::from_vec(vec![0.3, -0.7, 0.2, 0.5]);
        let h = 1e-5;
        // Finite differences of the non-detached path e/‖e‖ only.
        let normalize = |x: &DVector<f64>| x / x.norm();
        for j in 0..4 {
            let g = DVector::from_fn(4, |i, _| if i == j { 1.0 } else { 0.0 });
            let analytic = vpu_encode_backward(&e, EncodingMode::Robust, &g);
            for k in 0..4 {
                let mut p = e.clone();
                let mut m = e.clone();
                p[k] += h;
                m[k] -= h;
                let fd = (normalize(&p)[j] - normalize(&m)[j]) / (2.0 * h);
                assert!((analytic[k] - fd).abs() < 1e-8, "∂out{j}/∂e{k}");
                // The full forward differs by β on the diagonal: the residual
                // moves the value but is excluded from the gradient.
                let full = (vpu_encode(&p, EncodingMode::Robust, 0.5).unwrap()[j]
                    - vpu_encode(&m, EncodingMode::Robust, 0.5).unwrap()[j])
                    / (2.0 * h);
                let expected_gap = if j == k { 0.5 } else { 0.0 };
                assert!((full - fd - expected_gap).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn difficulty_examples() {
        let mut p = params();
        p.theta1.fill(0.0);
        p.theta2.fill(0.0);
        p.b2 = 0.0;
        let batch = vec![DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])];
        assert_eq!(estimate_difficulty(&batch, &p, DifficultyMode::Literal).unwrap(), vec![0.5]);

        let p = params();
        let batch: Vec<_> = (0..5)
            .map(|i| DVector::from_fn(4, |r, _| ((i * 7 + r * 3) % 5) as f64 - 2.0))
            .collect();
        let d = estimate_difficulty(&batch, &p, DifficultyMode::Literal).unwrap();
        assert!(d.iter().all(|&x| x > 0.0 && x < 1.0));
        let mut rev = batch.clone();
        rev.reverse();
        let d_rev = estimate_difficulty(&rev, &p, DifficultyMode::Literal).unwrap();
        assert!((d[0] - d_rev[0]).abs() < 1e-15);
        let per = estimate_difficulty(&batch, &p, DifficultyMode::PerSample).unwrap();
        assert_eq!(per.len(), 5);
        assert!(estimate_difficulty(&[], &p, DifficultyMode::Literal).is_err());
    }

    #[test]
    fn strategy_thresholds() {
        assert_eq!(select_strategy(0.2, 0.33, 0.66), Strategy::Standard);
        assert_eq!(select_strategy(0.5, 0.33, 0.66), Strategy::Robust);
        assert_eq!(select_strategy(0.9, 0.33, 0.66), Strategy::RobustAugmented);
        assert_eq!(select_strategy(0.33, 0.33, 0.66), Strategy::Robust);
        assert_eq!(select_strategy(0.66, 0.33, 0.66), Strategy::RobustAugmented);
    }

    #[test]
    fn step_emits_strategy_and_features() {
        let p = params();
        let unit = VisualUnit {
            params: &p,
            difficulty_mode: DifficultyMode::Literal,
            pinned: None,
            emit_context: true,
        };
        let input = VisualInput {
            features: vec![
                DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]),
                DVector::from_vec(vec![-0.5, 0.1, 0.2, 0.0]),
            ],
        };
        let s0 = AgentState::new(AgentId::Visual);
        let (out, s1) = unit.step(&input, &s0).unwrap();
        assert_eq!(s1.step_counter, 1);
        let kinds: Vec<_> = out.outbox.iter().map(|(_, p)| p.kind()).collect();
        assert!(kinds.contains(&"STRATEGY") && kinds.contains(&"FEATURES"));
        let (out2, s1b) = unit.step(&input, &s0).unwrap();
        assert_eq!(s1, s1b);
        assert_eq!(out.encoded, out2.encoded);
        assert!(matches!(
            unit.step(&input, &AgentState::new(AgentId::Nominal)),
            Err(Error::StateMismatch { .. })
        ));
    }
}

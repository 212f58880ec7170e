//! Linguistic context unit: standard and context-aware text encoding.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nominal::{PromptMeta, LAYOUT_KEY};
use super::{Agent, AgentMemory};
use crate::encoders::{gaussian_matrix, Embedding, FrozenEncoders, Modality, TextForward};
use crate::error::{Error, Result};
use crate::messaging::{AgentId, Message, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TextMode {
    Standard,
    Contextual,
}

/// Fusion network applied to `[text; visual_context]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextIntegrator {
    /// `Θ₄·ReLU(Θ₃·h + b₃) + b₄`.
    Mlp {
        theta3: DMatrix<f64>,
        b3: DVector<f64>,
        theta4: DMatrix<f64>,
        b4: DVector<f64>,
    },
    /// `P·h + b`, the simple-concatenation ablation.
    Linear { proj: DMatrix<f64>, bias: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct IntegratorCache {
    pub h: DVector<f64>,
    pre: Option<DVector<f64>>,
}

impl ContextIntegrator {
    /// The output layer starts at zero so an untrained integrator leaves the
    /// direction of the text feature untouched.
    pub fn mlp(d_embed: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = 2 * d_embed;
        ContextIntegrator::Mlp {
            theta3: gaussian_matrix(rng, hidden, fan_in, (2.0 / fan_in as f64).sqrt()),
            b3: DVector::zeros(hidden),
            theta4: DMatrix::zeros(d_embed, hidden),
            b4: DVector::zeros(d_embed),
        }
    }

    pub fn linear(d_embed: usize) -> Self {
        ContextIntegrator::Linear {
            proj: DMatrix::zeros(d_embed, 2 * d_embed),
            bias: DVector::zeros(d_embed),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ContextIntegrator::Mlp { theta3, .. } => theta3.ncols(),
            ContextIntegrator::Linear { proj, .. } => proj.ncols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ContextIntegrator::Mlp {
                theta3,
                b3,
                theta4,
                b4,
            } => ContextIntegrator::Mlp {
                theta3: DMatrix::zeros(theta3.nrows(), theta3.ncols()),
                b3: DVector::zeros(b3.len()),
                theta4: DMatrix::zeros(theta4.nrows(), theta4.ncols()),
                b4: DVector::zeros(b4.len()),
            },
            ContextIntegrator::Linear { proj, bias } => ContextIntegrator::Linear {
                proj: DMatrix::zeros(proj.nrows(), proj.ncols()),
                bias: DVector::zeros(bias.len()),
            },
        }
    }

    /// Adds another integrator of the same kind elementwise.
    pub fn accumulate(&mut self, other: &Self) {
        match (self, other) {
            (
                ContextIntegrator::Mlp {
                    theta3,
                    b3,
                    theta4,
                    b4,
                },
                ContextIntegrator::Mlp {
                    theta3: t3,
                    b3: c3,
                    theta4: t4,
                    b4: c4,
                },
            ) => {
                *theta3 += t3;
                *b3 += c3;
                *theta4 += t4;
                *b4 += c4;
            }
            (ContextIntegrator::Linear { proj, bias }, ContextIntegrator::Linear { proj: p, bias: b }) => {
                *proj += p;
                *bias += b;
            }
            _ => panic!("accumulating integrators of different kinds"),
        }
    }

    pub fn forward(&self, h: &DVector<f64>) -> Result<(DVector<f64>, IntegratorCache)> {
        if h.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "ctx_integrate",
                expected: self.input_dim(),
                actual: h.len(),
            });
        }
        Ok(match self {
            ContextIntegrator::Mlp {
                theta3,
                b3,
                theta4,
                b4,
            } => {
                let pre = theta3 * h + b3;
                let out = theta4 * pre.map(|x| x.max(0.0)) + b4;
                (
                    out,
                    IntegratorCache {
                        h: h.clone(),
                        pre: Some(pre),
                    },
                )
            }
            ContextIntegrator::Linear { proj, bias } => (
                proj * h + bias,
                IntegratorCache {
                    h: h.clone(),
                    pre: None,
                },
            ),
        })
    }

    /// Parameter gradients (same shape as `self`) and the input gradient.
    pub fn backward(&self, cache: &IntegratorCache, grad_out: &DVector<f64>) -> (Self, DVector<f64>) {
        match self {
            ContextIntegrator::Mlp { theta3, theta4, .. } => {
                let pre = cache.pre.as_ref().expect("mlp cache carries pre-activation");
                let hidden = pre.map(|x| x.max(0.0));
                let g_theta4 = grad_out * hidden.transpose();
                let g_hidden = theta4.tr_mul(grad_out);
                let g_pre = g_hidden.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 });
                let g_theta3 = &g_pre * cache.h.transpose();
                let g_h = theta3.tr_mul(&g_pre);
                (
                    ContextIntegrator::Mlp {
                        theta3: g_theta3,
                        b3: g_pre,
                        theta4: g_theta4,
                        b4: grad_out.clone(),
                    },
                    g_h,
                )
            }
            ContextIntegrator::Linear { proj, .. } => (
                ContextIntegrator::Linear {
                    proj: grad_out * cache.h.transpose(),
                    bias: grad_out.clone(),
                },
                proj.tr_mul(grad_out),
            ),
        }
    }
}

pub fn ctx_integrate(h: &DVector<f64>, integrator: &ContextIntegrator) -> Result<DVector<f64>> {
    integrator.forward(h).map(|(out, _)| out)
}

pub fn ctx_integrate_backward(
    h: &DVector<f64>,
    integrator: &ContextIntegrator,
    grad_out: &DVector<f64>,
) -> Result<(ContextIntegrator, DVector<f64>)> {
    let (_, cache) = integrator.forward(h)?;
    Ok(integrator.backward(&cache, grad_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinguisticUnitParams {
    pub lambda: f64,
    pub integrator: ContextIntegrator,
}

impl LinguisticUnitParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// One encoded prompt with the intermediates its gradient needs.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    pub standard: TextForward,
    pub integrator: Option<IntegratorCache>,
    pub output: DVector<f64>,
}

/// `Ψ_std` in standard mode; `λ·Ψ_std + (1−λ)·G([Ψ_std; c])` in contextual mode.
pub fn encode_prompt(
    encoders: &FrozenEncoders,
    params: &LinguisticUnitParams,
    token_vectors: &[DVector<f64>],
    context: Option<&DVector<f64>>,
) -> Result<EncodedPrompt> {
    let standard = encoders.text_forward(token_vectors)?;
    let Some(c) = context else {
        let output = standard.out.clone();
        return Ok(EncodedPrompt {
            standard,
            integrator: None,
            output,
        });
    };
    let h = concat(&standard.out, c);
    let (fused, cache) = params.integrator.forward(&h)?;
    let lambda = params.lambda;
    let output = &standard.out * lambda + fused * (1.0 - lambda);
    Ok(EncodedPrompt {
        standard,
        integrator: Some(cache),
        output,
    })
}

impl EncodedPrompt {
    /// Gradient with respect to each input token vector, accumulating the
    /// integrator's parameter gradient into `integrator_grad`.
    pub fn backward(
        &self,
        encoders: &FrozenEncoders,
        params: &LinguisticUnitParams,
        grad_out: &DVector<f64>,
        integrator_grad: &mut ContextIntegrator,
    ) -> DVector<f64> {
        let grad_std = match &self.integrator {
            None => grad_out.clone(),
            Some(cache) => {
                let lambda = params.lambda;
                let (g_params, g_h) = params.integrator.backward(cache, &(grad_out * (1.0 - lambda)));
                integrator_grad.accumulate(&g_params);
                let d = self.standard.out.len();
                grad_out * lambda + g_h.rows(0, d)
            }
        };
        encoders.text_backward(&self.standard, &grad_std)
    }
}

pub fn lcu_encode(
    encoders: &FrozenEncoders,
    token_vectors: &[DVector<f64>],
    mode: TextMode,
    context: Option<&Embedding>,
    params: &LinguisticUnitParams,
) -> Result<Embedding> {
    let ctx = match (mode, context) {
        (TextMode::Standard, _) => None,
        (TextMode::Contextual, Some(c)) => Some(c.to_vector()),
        (TextMode::Contextual, None) => {
            return Err(Error::Protocol {
                from: AgentId::Visual,
                to: AgentId::Linguistic,
                payload: "CONTEXT",
            })
        }
    };
    let enc = encode_prompt(encoders, params, token_vectors, ctx.as_ref())?;
    let normalized = mode == TextMode::Standard;
    Ok(Embedding::from_vector(&enc.output, Modality::Text, normalized))
}

pub struct LinguisticUnit<'a> {
    pub encoders: &'a FrozenEncoders,
    pub params: &'a LinguisticUnitParams,
    pub mode: TextMode,
}

#[derive(Debug, Clone)]
pub struct LinguisticOutput {
    pub layout: Vec<PromptMeta>,
    pub prompts: Vec<EncodedPrompt>,
    pub context: Option<DVector<f64>>,
    pub outbox: Vec<(AgentId, Payload)>,
}

impl LinguisticOutput {
    pub fn texts(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.prompts.iter().map(|p| &p.output)
    }
}

/// Splits the nominal unit's messages back into per-prompt token sequences.
pub(crate) fn unpack_prompts(inbound: &[Message], to: AgentId) -> Result<(Vec<PromptMeta>, Vec<Vec<DVector<f64>>>)> {
    let missing = |payload| Error::Protocol {
        from: AgentId::Nominal,
        to,
        payload,
    };
    let layout_json = inbound
        .iter()
        .filter(|m| m.sender == AgentId::Nominal)
        .find_map(|m| match &m.payload {
            Payload::Metadata(map) => map.get(LAYOUT_KEY),
            _ => None,
        })
        .ok_or_else(|| missing("METADATA"))?;
    let layout: Vec<PromptMeta> = serde_json::from_str(layout_json)?;
    let tokens = inbound
        .iter()
        .filter(|m| m.sender == AgentId::Nominal)
        .find_map(|m| match &m.payload {
            Payload::Features(f) => Some(f),
            _ => None,
        })
        .ok_or_else(|| missing("FEATURES"))?;
    let total: usize = layout.iter().map(|p| p.n_tokens).sum();
    if total != tokens.len() {
        return Err(Error::InvalidMessage(format!(
            "prompt layout covers {total} tokens, message carries {}",
            tokens.len()
        )));
    }
    let mut it = tokens.iter();
    let prompts = layout
        .iter()
        .map(|p| it.by_ref().take(p.n_tokens).map(Embedding::to_vector).collect())
        .collect();
    Ok((layout, prompts))
}

impl LinguisticUnit<'_> {
    /// Gradients of the integrator parameters and of every prompt's token
    /// vectors, given gradients with respect to the posted text features.
    pub fn backward(&self, out: &LinguisticOutput, grad_texts: &[DVector<f64>]) -> (ContextIntegrator, Vec<DVector<f64>>) {
        let mut g_int = self.params.integrator.zeros_like();
        let token_grads = out
            .prompts
            .iter()
            .zip(grad_texts)
            .map(|(p, g)| p.backward(self.encoders, self.params, g, &mut g_int))
            .collect();
        (g_int, token_grads)
    }
}

impl Agent for LinguisticUnit<'_> {
    type Input = [Message];
    type Output = LinguisticOutput;

    fn id(&self) -> AgentId {
        AgentId::Linguistic
    }

    fn run(&self, inbound: &[Message], _memory: &AgentMemory) -> Result<(LinguisticOutput, AgentMemory)> {
        let context = inbound
            .iter()
            .filter(|m| m.sender == AgentId::Visual)
            .find_map(|m| match &m.payload {
                Payload::Context(e) => Some(e.to_vector()),
                _ => None,
            });
        let used_context = match self.mode {
            TextMode::Standard => None,
            TextMode::Contextual => Some(context.clone().ok_or(Error::Protocol {
                from: AgentId::Visual,
                to: AgentId::Linguistic,
                payload: "CONTEXT",
            })?),
        };
        let (layout, token_seqs) = unpack_prompts(inbound, AgentId::Linguistic)?;
        let prompts = token_seqs
            .iter()
            .map(|t| encode_prompt(self.encoders, self.params, t, used_context.as_ref()))
            .collect::<Result<Vec<_>>>()?;

        let normalized = self.mode == TextMode::Standard;
        let features = prompts
            .iter()
            .map(|p| Embedding::from_vector(&p.output, Modality::Text, normalized))
            .collect();
        let meta = Payload::Metadata(
            [(LAYOUT_KEY.to_owned(), serde_json::to_string(&layout)?)].into(),
        );
        let outbox = vec![
            (AgentId::Coordinator, Payload::Features(features)),
            (AgentId::Coordinator, meta),
        ];
        let memory = AgentMemory::Linguistic {
            last_context: used_context.as_ref().map(|c| c.as_slice().to_vec()),
        };
        Ok((
            LinguisticOutput {
                layout,
                prompts,
                context: used_context,
                outbox,
            },
            memory,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenize;
    use rand::SeedableRng;

    fn setup() -> (FrozenEncoders, LinguisticUnitParams) {
        let enc = FrozenEncoders::generate(8, 4, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut integrator = ContextIntegrator::mlp(4, 4, &mut rng);
        if let ContextIntegrator::Mlp { theta4, b4, .. } = &mut integrator {
            *theta4 = gaussian_matrix(&mut rng, 4, 4, 0.5);
            *b4 = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.3]);
        }
        (
            enc,
            LinguisticUnitParams {
                lambda: 0.7,
                integrator,
            },
        )
    }

    #[test]
    fn integrator_degenerate_cases() {
        let zero = ContextIntegrator::Mlp {
            theta3: DMatrix::zeros(4, 4),
            b3: DVector::zeros(4),
            theta4: DMatrix::zeros(2, 4),
            b4: DVector::from_vec(vec![0.25, -1.0]),
        };
        let h = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ctx_integrate(&h, &zero).unwrap(), DVector::from_vec(vec![0.25, -1.0]));

        // Θ₃ = I padded, Θ₄ = I; negative inputs are killed by the ReLU.
        let mut theta3 = DMatrix::zeros(2, 4);
        theta3[(0, 0)] = 1.0;
        theta3[(1, 1)] = 1.0;
        let ident = ContextIntegrator::Mlp {
            theta3,
            b3: DVector::zeros(2),
            theta4: DMatrix::identity(2, 2),
            b4: DVector::zeros(2),
        };
        let neg = DVector::from_vec(vec![-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(ctx_integrate(&neg, &ident).unwrap(), DVector::zeros(2));
        assert!(matches!(
            ctx_integrate(&DVector::zeros(3), &ident),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn flat(i: &ContextIntegrator) -> Vec<f64> {
        match i {
            ContextIntegrator::Mlp {
                theta3,
                b3,
                theta4,
                b4,
            } => [theta3.as_slice(), b3.as_slice(), theta4.as_slice(), b4.as_slice()].concat(),
            ContextIntegrator::Linear { proj, bias } => [proj.as_slice(), bias.as_slice()].concat(),
        }
    }

    fn perturbed(i: &ContextIntegrator, k: usize, delta: f64) -> ContextIntegrator {
        let mut out = i.clone();
        let mut idx = k;
        let slices: Vec<&mut [f64]> = match &mut out {
            ContextIntegrator::Mlp {
                theta3,
                b3,
                theta4,
                b4,
            } => vec![
                theta3.as_mut_slice(),
                b3.as_mut_slice(),
                theta4.as_mut_slice(),
                b4.as_mut_slice(),
            ],
            ContextIntegrator::Linear { proj, bias } => vec![proj.as_mut_slice(), bias.as_mut_slice()],
        };
        for s in slices {
            if idx < s.len() {
                s[idx] += delta;
                break;
            }
            idx -= s.len();
        }
        out
    }

    #[test]
    fn integrator_gradients_match_central_differences() {
        let (_, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for integ in [params.integrator.clone(), {
            let mut l = ContextIntegrator::linear(4);
            if let ContextIntegrator::Linear { proj, .. } = &mut l {
                *proj = gaussian_matrix(&mut rng, 4, 8, 0.4);
            }
            l
        }] {
            let h = DVector::from_fn(8, |i, _| ((i * 5) % 7) as f64 / 3.0 - 1.0);
            let w = DVector::from_vec(vec![0.3, -1.1, 0.7, 0.2]);
            let loss = |g: &ContextIntegrator, x: &DVector<f64>| ctx_integrate(x, g).unwrap().dot(&w);
            let (g_params, g_h) = ctx_integrate_backward(&h, &integ, &w).unwrap();
            let analytic = flat(&g_params);
            let step = 1e-5;
            for (k, a) in analytic.iter().enumerate() {
                let fd = (loss(&perturbed(&integ, k, step), &h) - loss(&perturbed(&integ, k, -step), &h))
                    / (2.0 * step);
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "param {k}: analytic {a} fd {fd}");
            }
            for k in 0..8 {
                let mut p = h.clone();
                let mut m = h.clone();
                p[k] += step;
                m[k] -= step;
                let fd = (loss(&integ, &p) - loss(&integ, &m)) / (2.0 * step);
                let err = (g_h[k] - fd).abs() / g_h[k].abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4);
            }
        }
    }

    #[test]
    fn lambda_degenerate_mixing() {
        let (enc, mut params) = setup();
        let toks = enc.token_vectors(&tokenize("a photo of zorbu"));
        let c = Embedding::new(vec![0.2, -0.1, 0.4, 0.3], Modality::Visual);
        let std = lcu_encode(&enc, &toks, TextMode::Standard, None, &params).unwrap();

        params.lambda = 1.0;
        let ctx = lcu_encode(&enc, &toks, TextMode::Contextual, Some(&c), &params).unwrap();
        assert_eq!(ctx.values, std.values);

        params.lambda = 0.0;
        let ctx = lcu_encode(&enc, &toks, TextMode::Contextual, Some(&c), &params).unwrap();
        let h = concat(&std.to_vector(), &c.to_vector());
        let fused = ctx_integrate(&h, &params.integrator).unwrap();
        assert_eq!(ctx.values, fused.as_slice());
        assert_eq!(ctx.dim(), 4);

        assert!(matches!(
            lcu_encode(&enc, &toks, TextMode::Contextual, None, &params),
            Err(Error::Protocol { .. })
        ));
    }
}

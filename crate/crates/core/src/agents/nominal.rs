//! Nominal embedding unit: learnable name vectors for OOD concepts, prompt
//! generation with name injection, and context-exchange augmentation.

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Agent, AgentMemory, Strategy};
use crate::encoders::{tokenize, Embedding, Modality, PretrainedVocab, PromptTemplate, TEMPLATES};
use crate::error::{Error, Result};
use crate::messaging::{AgentId, Message, Payload};

pub(crate) const LAYOUT_KEY: &str = "layout";
pub const NAME_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameTable {
    pub concepts: Vec<String>,
    /// One `n_c × d_tok` matrix per concept; row `i` is `v_i`.
    pub vectors: Vec<DMatrix<f64>>,
    pub templates: Vec<PromptTemplate>,
}

impl NameTable {
    pub fn n_c(&self) -> usize {
        self.vectors.first().map_or(0, DMatrix::nrows)
    }

    pub fn d_tok(&self) -> usize {
        self.vectors.first().map_or(0, DMatrix::ncols)
    }

    pub fn index_of(&self, concept: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c == concept)
            .ok_or_else(|| Error::UnknownConcept(concept.to_owned()))
    }

    /// Mean of the concept's learned vectors; this is what replaces each
    /// name token.
    pub fn name_embedding(&self, concept: usize) -> DVector<f64> {
        let m = &self.vectors[concept];
        DVector::from_fn(m.ncols(), |j, _| m.column(j).mean())
    }

    pub fn n_trainable(&self) -> usize {
        self.vectors.iter().map(|m| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<DMatrix<f64>> {
        self.vectors
            .iter()
            .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
            .collect()
    }

    pub fn owned_templates(&self, concept: usize) -> impl Iterator<Item = &PromptTemplate> {
        let name = &self.concepts[concept];
        self.templates
            .iter()
            .filter(move |t| t.owner_concept.as_deref() == Some(name.as_str()))
    }
}

/// Each concept gets `n_c` vectors at `UNK + N(0, 0.02²)` and owns one
/// template, assigned round-robin.
pub fn neu_init_concepts(names: &[String], n_c: usize, unk: &DVector<f64>, seed: u64) -> Result<NameTable> {
    if n_c == 0 {
        return Err(Error::InvalidConfig("n_c must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::DuplicateConcept(n.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4E41_4D45);
    let noise = Normal::new(0.0, NAME_INIT_SCALE).expect("positive scale");
    let d = unk.len();
    let vectors = names
        .iter()
        .map(|_| DMatrix::from_fn(n_c, d, |_, j| unk[j] + noise.sample(&mut rng)))
        .collect();
    let templates = names
        .iter()
        .enumerate()
        .map(|(i, n)| PromptTemplate::owned_by(TEMPLATES[i % TEMPLATES.len()], n.clone()))
        .collect::<Result<_>>()?;
    Ok(NameTable {
        concepts: names.to_vec(),
        vectors,
        templates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTokens {
    pub text: String,
    pub tokens: Vec<String>,
    pub vectors: Vec<DVector<f64>>,
    pub name_positions: Range<usize>,
}

fn name_span(template: &PromptTemplate, name: &str) -> Range<usize> {
    let prefix = template.text().split("{}").next().unwrap_or("");
    let start = tokenize(prefix).len();
    start..start + tokenize(name).len()
}

/// Renders, tokenizes, and optionally swaps name tokens for the concept's
/// learned name embedding.
pub(crate) fn build_prompt(
    name: &str,
    name_vector: Option<&DVector<f64>>,
    template: &PromptTemplate,
    vocab: &PretrainedVocab,
) -> PromptTokens {
    let text = template.render(name);
    let tokens = tokenize(&text);
    let span = name_span(template, name);
    let vectors = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| match name_vector {
            Some(v) if span.contains(&i) => v.clone(),
            _ => vocab.lookup(t).clone(),
        })
        .collect();
    PromptTokens {
        text,
        tokens,
        vectors,
        name_positions: span,
    }
}

pub fn neu_generate_prompt(
    concept: &str,
    table: &NameTable,
    template: &PromptTemplate,
    vocab: &PretrainedVocab,
) -> Result<PromptTokens> {
    let idx = table.index_of(concept)?;
    Ok(build_prompt(concept, Some(&table.name_embedding(idx)), template, vocab))
}

/// One planned description: `concept` rendered with a template owned by `owner`.
#[derive(Debug, Clone, PartialEq)]
pub struct Description {
    pub concept: usize,
    pub owner: usize,
    pub template: PromptTemplate,
}

fn owner_index(concepts: &[String], t: &PromptTemplate) -> Option<usize> {
    t.owner_concept
        .as_ref()
        .and_then(|o| concepts.iter().position(|c| c == o))
}

/// Standard descriptions first, then every template of every other concept.
pub(crate) fn exchange_plan(concepts: &[String], bank: &[PromptTemplate]) -> Result<Vec<Description>> {
    if bank.is_empty() {
        return Err(Error::EmptyTemplateBank);
    }
    let owned: Vec<Vec<&PromptTemplate>> = (0..concepts.len())
        .map(|c| bank.iter().filter(|t| owner_index(concepts, t) == Some(c)).collect())
        .collect();
    if let Some(c) = owned.iter().position(Vec::is_empty) {
        return Err(Error::InvalidConfig(format!(
            "concept `{}` owns no template",
            concepts[c]
        )));
    }
    let mut plan = Vec::new();
    for c in 0..concepts.len() {
        for t in &owned[c] {
            plan.push(Description {
                concept: c,
                owner: c,
                template: (*t).clone(),
            });
        }
        for (o, ts) in owned.iter().enumerate().filter(|(o, _)| *o != c) {
            for t in ts {
                plan.push(Description {
                    concept: c,
                    owner: o,
                    template: (*t).clone(),
                });
            }
        }
    }
    Ok(plan)
}

pub(crate) fn standard_plan(table: &NameTable) -> Result<Vec<Description>> {
    let mut plan = Vec::new();
    for c in 0..table.concepts.len() {
        let before = plan.len();
        for t in table.owned_templates(c) {
            plan.push(Description {
                concept: c,
                owner: c,
                template: t.clone(),
            });
        }
        if plan.len() == before {
            return Err(Error::InvalidConfig(format!(
                "concept `{}` owns no template",
                table.concepts[c]
            )));
        }
    }
    Ok(plan)
}

/// `(concept, description)` pairs: each concept with its own templates, then
/// with every other concept's templates.
pub fn neu_context_exchange(concepts: &[String], bank: &[PromptTemplate]) -> Result<Vec<(String, String)>> {
    Ok(exchange_plan(concepts, bank)?
        .into_iter()
        .map(|d| (concepts[d.concept].clone(), d.template.render(&concepts[d.concept])))
        .collect())
}

/// Wire description of one prompt in a nominal → linguistic message pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub concept: usize,
    pub owner: usize,
    pub n_tokens: usize,
    pub text: String,
}

pub struct NominalUnit<'a> {
    pub table: &'a NameTable,
    pub vocab: &'a PretrainedVocab,
    /// Replace name tokens with learned vectors.
    pub inject: bool,
    /// Allow context-exchange augmentation when the visual unit asks for it.
    pub exchange: bool,
}

#[derive(Debug, Clone)]
pub struct NominalOutput {
    pub strategy: Strategy,
    pub plan: Vec<Description>,
    pub prompts: Vec<PromptTokens>,
    pub outbox: Vec<(AgentId, Payload)>,
}

impl NominalOutput {
    pub fn layout(&self) -> Vec<PromptMeta> {
        self.plan
            .iter()
            .zip(&self.prompts)
            .map(|(d, p)| PromptMeta {
                concept: d.concept,
                owner: d.owner,
                n_tokens: p.vectors.len(),
                text: p.text.clone(),
            })
            .collect()
    }
}

impl NominalUnit<'_> {
    pub fn prompts_for(&self, plan: &[Description]) -> Vec<PromptTokens> {
        let names: Vec<DVector<f64>> = if self.inject {
            (0..self.table.concepts.len())
                .map(|c| self.table.name_embedding(c))
                .collect()
        } else {
            Vec::new()
        };
        plan.iter()
            .map(|d| {
                build_prompt(
                    &self.table.concepts[d.concept],
                    names.get(d.concept),
                    &d.template,
                    self.vocab,
                )
            })
            .collect()
    }

    /// Name-vector gradients from per-prompt token gradients. Every token of
    /// a prompt shares one gradient under mean pooling, so each name
    /// position contributes it once, split evenly over the `n_c` vectors.
    pub fn backward(&self, out: &NominalOutput, token_grads: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        let mut grads = self.table.zeros_like();
        if !self.inject {
            return grads;
        }
        let n_c = self.table.n_c() as f64;
        for ((d, p), g) in out.plan.iter().zip(&out.prompts).zip(token_grads) {
            let scale = p.name_positions.len() as f64 / n_c;
            let m = &mut grads[d.concept];
            for mut row in m.row_iter_mut() {
                row += g.transpose() * scale;
            }
        }
        grads
    }
}

impl Agent for NominalUnit<'_> {
    type Input = [Message];
    type Output = NominalOutput;

    fn id(&self) -> AgentId {
        AgentId::Nominal
    }

    fn run(&self, inbound: &[Message], _memory: &AgentMemory) -> Result<(NominalOutput, AgentMemory)> {
        let strategy = inbound
            .iter()
            .filter(|m| m.sender == AgentId::Visual)
            .find_map(|m| match m.payload {
                Payload::Strategy { strategy, .. } => Some(strategy),
                _ => None,
            })
            .ok_or(Error::Protocol {
                from: AgentId::Visual,
                to: AgentId::Nominal,
                payload: "STRATEGY",
            })?;
        let plan = if self.exchange && strategy == Strategy::RobustAugmented {
            exchange_plan(&self.table.concepts, &self.table.templates)?
        } else {
            standard_plan(self.table)?
        };
        let prompts = self.prompts_for(&plan);
        let mut out = NominalOutput {
            strategy,
            plan,
            prompts,
            outbox: Vec::new(),
        };
        let layout = serde_json::to_string(&out.layout())?;
        let tokens = out
            .prompts
            .iter()
            .flat_map(|p| p.vectors.iter())
            .map(|v| Embedding::from_vector(v, Modality::Text, false))
            .collect();
        out.outbox = vec![
            (
                AgentId::Linguistic,
                Payload::Metadata([(LAYOUT_KEY.to_owned(), layout)].into()),
            ),
            (AgentId::Linguistic, Payload::Features(tokens)),
        ];
        Ok((
            out,
            AgentMemory::Nominal {
                last_strategy: Some(strategy),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::FrozenEncoders;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn init_counts_and_determinism() {
        let unk = DVector::from_element(16, 0.3);
        let t = neu_init_concepts(&names(&["a b", "c d", "e f", "g h"]), 2, &unk, 4).unwrap();
        assert_eq!(t.n_trainable(), 4 * 2 * 16);
        assert_eq!(t.vectors.len() * t.n_c(), 8);
        let t2 = neu_init_concepts(&names(&["a b", "c d", "e f", "g h"]), 2, &unk, 4).unwrap();
        assert_eq!(t, t2);
        assert!(matches!(
            neu_init_concepts(&names(&["x", "x"]), 2, &unk, 0),
            Err(Error::DuplicateConcept(_))
        ));
    }

    #[test]
    fn init_stays_near_unk() {
        // Monte Carlo over many seeds: distance to UNK is 0.02·χ₁₆ ≈ 0.08.
        let unk = DVector::from_fn(16, |i, _| (i as f64 * 0.37).sin());
        let mut inside = 0usize;
        let mut total = 0usize;
        for seed in 0..200 {
            let t = neu_init_concepts(&names(&["p", "q", "r", "s", "u"]), 2, &unk, seed).unwrap();
            for m in &t.vectors {
                for row in m.row_iter() {
                    total += 1;
                    if (row.transpose() - &unk).norm() < 0.2 {
                        inside += 1;
                    }
                }
            }
        }
        assert!(inside as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn identity_template_injects_every_token() {
        let enc = FrozenEncoders::generate(8, 4, 4, 2);
        let table = neu_init_concepts(&names(&["zorbu kelta", "miva dorn"]), 2, enc.vocab.unk(), 1).unwrap();
        let ident = PromptTemplate::new("{}").unwrap();
        let p = neu_generate_prompt("zorbu kelta", &table, &ident, &enc.vocab).unwrap();
        assert_eq!(p.vectors.len(), 2);
        let mean = table.name_embedding(0);
        assert!(p.vectors.iter().all(|v| *v == mean));
        assert!(matches!(
            neu_generate_prompt("nope", &table, &ident, &enc.vocab),
            Err(Error::UnknownConcept(_))
        ));
    }

    #[test]
    fn concepts_differ_only_at_name_positions() {
        let enc = FrozenEncoders::generate(8, 4, 4, 2);
        let table = neu_init_concepts(&names(&["zorbu kelta", "miva dorn"]), 2, enc.vocab.unk(), 1).unwrap();
        let t = PromptTemplate::new("a photo of {}").unwrap();
        let a = neu_generate_prompt("zorbu kelta", &table, &t, &enc.vocab).unwrap();
        let b = neu_generate_prompt("miva dorn", &table, &t, &enc.vocab).unwrap();
        assert_eq!(a.name_positions, 3..5);
        for i in 0..5 {
            assert_eq!(a.vectors[i] == b.vectors[i], !a.name_positions.contains(&i));
        }
    }

    #[test]
    fn exchange_examples() {
        let bank = vec![
            PromptTemplate::owned_by("a photo of {}", "dog").unwrap(),
            PromptTemplate::owned_by("a painting of {}", "mural").unwrap(),
        ];
        let out = neu_context_exchange(&names(&["dog", "mural"]), &bank).unwrap();
        assert!(out.contains(&("dog".into(), "a painting of dog".into())));

        let single = neu_context_exchange(&names(&["dog"]), &bank[..1]).unwrap();
        assert_eq!(single, vec![("dog".to_string(), "a photo of dog".to_string())]);

        assert!(matches!(
            neu_context_exchange(&names(&["dog"]), &[]),
            Err(Error::EmptyTemplateBank)
        ));
    }

    #[test]
    fn exchange_count_by_enumeration() {
        let concepts = names(&["a", "b", "c"]);
        let bank: Vec<_> = ["x {}", "y {}", "z {}"]
            .iter()
            .zip(&concepts)
            .map(|(t, c)| PromptTemplate::owned_by(*t, c.clone()).unwrap())
            .collect();
        let out = neu_context_exchange(&concepts, &bank).unwrap();
        // Independent count: every (concept, template) pair exactly once.
        let mut expected = BTreeSet::new();
        for c in &concepts {
            for t in ["x", "y", "z"] {
                expected.insert((c.clone(), format!("{t} {c}")));
            }
        }
        assert_eq!(out.len(), 9);
        assert_eq!(out.iter().cloned().collect::<BTreeSet<_>>(), expected);
    }
}

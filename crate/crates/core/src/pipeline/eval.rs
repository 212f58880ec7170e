use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::agents::nominal::build_prompt;
use crate::agents::{encode_prompt, gc_temperature, AblationFlags, DifficultyMode, VisualUnit};
use crate::datagen::{Benchmark, ClassTag, DatasetSplit};
use crate::encoders::{FeatureProvider, PromptTemplate, EVAL_TEMPLATE};
use crate::error::{Error, Result};
use crate::objectives::{argmax, zero_shot_probs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VocabularyMode {
    OodOnly,
    Composite,
}

/// What produces the class prompts at evaluation time.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    /// The frozen dual encoder with plain prompts and no adapter.
    Frozen,
    Adapted {
        params: &'a AdapterParams,
        flags: &'a AblationFlags,
        difficulty_mode: DifficultyMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: VocabularyMode,
    pub top1: f64,
    pub ood_top1: f64,
    /// Only defined in composite mode.
    pub sc_top1: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub n_test: usize,
}

/// Class text embeddings in benchmark class order, restricted to `classes`.
pub fn class_text_embeddings(benchmark: &Benchmark, model: Model<'_>, classes: &[usize]) -> Result<Vec<DVector<f64>>> {
    let template = PromptTemplate::new(EVAL_TEMPLATE)?;
    let enc = &benchmark.encoders;
    classes
        .iter()
        .map(|&c| {
            let class = &benchmark.classes[c];
            match model {
                Model::Frozen => {
                    let p = build_prompt(&class.name, None, &template, &enc.vocab);
                    Ok(enc.text_forward(&p.vectors)?.out)
                }
                Model::Adapted { params, flags, .. } => {
                    let name_vec = match class.tag {
                        ClassTag::Ood if flags.uses_name_embeddings() => {
                            Some(params.names.name_embedding(params.names.index_of(&class.name)?))
                        }
                        _ => None,
                    };
                    let p = build_prompt(&class.name, name_vec.as_ref(), &template, &enc.vocab);
                    let ctx = if flags.contextual_text() {
                        params.eval_context.as_ref()
                    } else {
                        None
                    };
                    Ok(encode_prompt(enc, &params.linguistic, &p.vectors, ctx)?.output)
                }
            }
        })
        .collect()
}

/// Image embeddings of the given samples after the visual unit's encoding.
fn image_embeddings(benchmark: &Benchmark, model: Model<'_>, ids: &[usize]) -> Result<Vec<DVector<f64>>> {
    let raw = ids
        .iter()
        .map(|&i| Ok(benchmark.image_features(i)?.to_vector()))
        .collect::<Result<Vec<_>>>()?;
    match model {
        Model::Frozen => Ok(raw),
        Model::Adapted {
            params,
            flags,
            difficulty_mode,
        } => {
            let unit = VisualUnit {
                params: &params.visual,
                difficulty_mode,
                pinned: flags.pinned_strategy(),
                emit_context: false,
            };
            Ok(unit.process(&raw)?.3)
        }
    }
}

/// Top-1 accuracy of the zero-shot classifier over the chosen vocabulary.
pub fn evaluate(benchmark: &Benchmark, split: &DatasetSplit, model: Model<'_>, mode: VocabularyMode) -> Result<EvalResult> {
    let vocab: Vec<usize> = match mode {
        VocabularyMode::OodOnly => benchmark.class_indices(ClassTag::Ood),
        VocabularyMode::Composite => (0..benchmark.classes.len()).collect(),
    };
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let kappa = match model {
        Model::Frozen => 1.0,
        Model::Adapted { params, flags, .. } if flags.adaptive_temperature() => {
            gc_temperature(params.coordinator.kappa_param)
        }
        Model::Adapted { .. } => 1.0,
    };
    let texts: Vec<DVector<f64>> = class_text_embeddings(benchmark, model, &vocab)?
        .into_iter()
        .map(|t| {
            let n = t.norm();
            t / n
        })
        .collect();
    let test: Vec<(usize, usize)> = split
        .test
        .iter()
        .copied()
        .filter(|(_, c)| vocab.contains(c))
        .collect();
    let ids: Vec<usize> = test.iter().map(|t| t.0).collect();
    let images = image_embeddings(benchmark, model, &ids)?;

    let mut correct: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((_, label), img) in test.iter().zip(&images) {
        let img = img / img.norm();
        let sims: Vec<f64> = texts.iter().map(|t| img.dot(t)).collect();
        let probs = zero_shot_probs(&sims, kappa)?;
        let pred = vocab[argmax(&probs)];
        let e = correct.entry(*label).or_default();
        e.0 += usize::from(pred == *label);
        e.1 += 1;
    }
    let rate = |filter: &dyn Fn(usize) -> bool| -> Option<f64> {
        let (c, n) = correct
            .iter()
            .filter(|(k, _)| filter(**k))
            .fold((0, 0), |acc, (_, v)| (acc.0 + v.0, acc.1 + v.1));
        (n > 0).then(|| c as f64 / n as f64)
    };
    let is_ood = |c: usize| benchmark.classes[c].tag == ClassTag::Ood;
    Ok(EvalResult {
        mode,
        top1: rate(&|_| true).unwrap_or(0.0),
        ood_top1: rate(&is_ood).unwrap_or(0.0),
        sc_top1: match mode {
            VocabularyMode::Composite => rate(&|c| !is_ood(c)),
            VocabularyMode::OodOnly => None,
        },
        per_class: correct
            .iter()
            .map(|(c, (k, n))| (benchmark.classes[*c].name.clone(), *k as f64 / *n as f64))
            .collect(),
        n_test: test.len(),
    })
}

/// Accuracy of an arbitrary predictor over the split's test set; the
/// harness sanity bound for any classifier plugged in.
pub fn evaluate_predictor(split: &DatasetSplit, predict: impl Fn(usize, usize) -> usize) -> f64 {
    if split.test.is_empty() {
        return 0.0;
    }
    let hits = split.test.iter().filter(|&&(id, c)| predict(id, c) == c).count();
    hits as f64 / split.test.len() as f64
}

//! Frozen visual and text feature providers.
//!
//! The visual encoder is `tanh(W_v · raw)` and the text encoder is
//! `normalize(W_t · mean(token_vectors))`. Both weight matrices and the
//! token table are drawn once from a seed and never change afterwards. The
//! text encoder is linear before the normalization so its Jacobian with
//! respect to the input token vectors is exact and cheap; name embeddings
//! are trained through it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Templates available to the prompt machinery. The first entry is the
/// evaluation template used for every class.
pub const TEMPLATES: [&str; 4] = [
    "a photo of {}",
    "a painting of {}",
    "a sketch of {}",
    "a rendering of {}",
];

pub const EVAL_TEMPLATE: &str = TEMPLATES[0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub modality: Modality,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>, modality: Modality) -> Self {
        Self {
            values,
            modality,
            normalized: false,
        }
    }

    pub fn from_vector(v: &DVector<f64>, modality: Modality, normalized: bool) -> Self {
        Self {
            values: v.as_slice().to_vec(),
            modality,
            normalized,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// Unit-norm copy. A zero vector stays zero and is not marked normalized.
    pub fn normalize(&self) -> Embedding {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Embedding {
            values: self.values.iter().map(|x| x / n).collect(),
            modality: self.modality,
            normalized: true,
        }
    }
}

/// Lowercase, split on whitespace, strip punctuation. Tokens that are pure
/// punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
    pub owner_concept: Option<String>,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches("{}").count() != 1 {
            return Err(Error::InvalidTemplate(text));
        }
        Ok(Self {
            text,
            owner_concept: None,
        })
    }

    pub fn owned_by(text: impl Into<String>, concept: impl Into<String>) -> Result<Self> {
        let mut t = Self::new(text)?;
        t.owner_concept = Some(concept.into());
        Ok(t)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, name: &str) -> String {
        self.text.replacen("{}", name, 1)
    }
}

/// Substitutes `name` for the template's placeholder.
pub fn render_prompt(template: &str, name: &str) -> Result<String> {
    Ok(PromptTemplate::new(template)?.render(name))
}

/// Token table learned during "pretraining". Anything missing maps to `unk`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedVocab {
    tokens: BTreeMap<String, DVector<f64>>,
    unk: DVector<f64>,
    pub seed: u64,
}

impl PretrainedVocab {
    pub fn new(unk: DVector<f64>, seed: u64) -> Self {
        Self {
            tokens: BTreeMap::new(),
            unk,
            seed,
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: DVector<f64>) {
        self.tokens.insert(token.into(), vector);
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains_key(token)
    }

    pub fn unk(&self) -> &DVector<f64> {
        &self.unk
    }

    pub fn lookup(&self, token: &str) -> &DVector<f64> {
        self.tokens.get(token).unwrap_or(&self.unk)
    }

    pub fn dim(&self) -> usize {
        self.unk.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in sorted order, which is also the on-disk order.
    pub fn tokens(&self) -> impl Iterator<Item = (&str, &DVector<f64>)> {
        self.tokens.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Forward intermediates of the text encoder needed for its gradient.
#[derive(Debug, Clone)]
pub struct TextForward {
    /// `W_t · mean(tokens)`, before normalization.
    pub pre: DVector<f64>,
    pub out: DVector<f64>,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    pub w_v: DMatrix<f64>,
    pub w_t: DMatrix<f64>,
    pub vocab: PretrainedVocab,
}

/// Values are drawn as f32 and widened, so the f32 files on disk hold them exactly.
fn gaussian_f32(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    n.sample(rng) as f32 as f64
}

pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Row-major fill so the draw order matches the file layout.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = gaussian_f32(rng, std);
        }
    }
    m
}

pub(crate) fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| gaussian_f32(rng, std)))
}

impl FrozenEncoders {
    /// Draws `W_v`, `W_t`, the UNK vector and one vector per template word.
    /// Class-name tokens are added by the benchmark generator.
    pub fn generate(d_raw: usize, d_embed: usize, d_tok: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E4C0_DE45_0001);
        let w_v = gaussian_matrix(&mut rng, d_embed, d_raw, 1.0 / (d_raw as f64).sqrt());
        let w_t = gaussian_matrix(&mut rng, d_embed, d_tok, 1.0 / (d_tok as f64).sqrt());
        let tok_std = 1.0 / (d_tok as f64).sqrt();
        let unk = gaussian_vector(&mut rng, d_tok, tok_std);
        let mut vocab = PretrainedVocab::new(unk, seed);
        let mut words: Vec<String> = TEMPLATES.iter().flat_map(|t| tokenize(t)).collect();
        words.sort();
        words.dedup();
        for w in words {
            let v = gaussian_vector(&mut rng, d_tok, tok_std);
            vocab.insert(w, v);
        }
        Self { w_v, w_t, vocab }
    }

    pub fn d_raw(&self) -> usize {
        self.w_v.ncols()
    }

    pub fn d_embed(&self) -> usize {
        self.w_v.nrows()
    }

    pub fn d_tok(&self) -> usize {
        self.w_t.ncols()
    }

    pub fn encode_image(&self, raw: &[f64]) -> Result<Embedding> {
        if raw.len() != self.d_raw() {
            return Err(Error::DimensionMismatch {
                context: "encode_image",
                expected: self.d_raw(),
                actual: raw.len(),
            });
        }
        let z = DVector::from_column_slice(raw);
        let e = (&self.w_v * z).map(f64::tanh);
        Ok(Embedding::from_vector(&e, Modality::Visual, false))
    }

    pub fn token_vectors(&self, tokens: &[String]) -> Vec<DVector<f64>> {
        tokens.iter().map(|t| self.vocab.lookup(t).clone()).collect()
    }

    pub fn text_forward(&self, token_vectors: &[DVector<f64>]) -> Result<TextForward> {
        let Some(first) = token_vectors.first() else {
            return Err(Error::EmptyTokens);
        };
        let mut mean = DVector::zeros(first.len());
        for v in token_vectors {
            if v.len() != self.d_tok() {
                return Err(Error::DimensionMismatch {
                    context: "encode_text",
                    expected: self.d_tok(),
                    actual: v.len(),
                });
            }
            mean += v;
        }
        mean /= token_vectors.len() as f64;
        let pre = &self.w_t * mean;
        let out = &pre / pre.norm();
        Ok(TextForward {
            pre,
            out,
            n_tokens: token_vectors.len(),
        })
    }

    pub fn encode_text(&self, token_vectors: &[DVector<f64>]) -> Result<Embedding> {
        let f = self.text_forward(token_vectors)?;
        Ok(Embedding::from_vector(&f.out, Modality::Text, true))
    }

    /// Gradient of a scalar loss with respect to one input token vector,
    /// given the gradient with respect to the encoder output. Every position
    /// receives the same gradient because pooling is a plain mean.
    pub fn text_backward(&self, fwd: &TextForward, grad_out: &DVector<f64>) -> DVector<f64> {
        let grad_pre = normalize_backward(&fwd.pre, grad_out);
        self.w_t.tr_mul(&grad_pre) / fwd.n_tokens as f64
    }

    /// Jacobian of the encoder output with respect to any single input token
    /// vector (`d_embed × d_tok`).
    pub fn text_jacobian(&self, token_vectors: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let f = self.text_forward(token_vectors)?;
        let n = f.pre.norm();
        let u = &f.out;
        let proj = DMatrix::identity(u.len(), u.len()) - u * u.transpose();
        Ok(proj * &self.w_t / (n * f.n_tokens as f64))
    }

    /// SHA-256 over every frozen value, in file order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.w_v, &self.w_t] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    h.update(m[(r, c)].to_le_bytes());
                }
            }
        }
        for (tok, v) in self.vocab.tokens() {
            h.update(tok.as_bytes());
            h.update([0u8]);
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        for x in self.vocab.unk().iter() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Flat f32 layout: `W_v` row-major, `W_t` row-major, then each vocab
    /// token vector in sorted-token order, then UNK.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |x: f64| out.extend_from_slice(&(x as f32).to_le_bytes());
        for m in [&self.w_v, &self.w_t] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    push(m[(r, c)]);
                }
            }
        }
        for (_, v) in self.vocab.tokens() {
            v.iter().copied().for_each(&mut push);
        }
        self.vocab.unk().iter().copied().for_each(&mut push);
        out
    }

    pub fn from_f32_bytes(
        bytes: &[u8],
        d_raw: usize,
        d_embed: usize,
        d_tok: usize,
        tokens: &[String],
        seed: u64,
    ) -> Option<Self> {
        let vals = f32_values(bytes)?;
        let expected = d_embed * d_raw + d_embed * d_tok + (tokens.len() + 1) * d_tok;
        if vals.len() != expected {
            return None;
        }
        let mut it = vals.into_iter();
        let w_v = DMatrix::from_row_iterator(d_embed, d_raw, it.by_ref().take(d_embed * d_raw));
        let w_t = DMatrix::from_row_iterator(d_embed, d_tok, it.by_ref().take(d_embed * d_tok));
        let mut table = Vec::with_capacity(tokens.len());
        for t in tokens {
            table.push((t.clone(), DVector::from_iterator(d_tok, it.by_ref().take(d_tok))));
        }
        let unk = DVector::from_iterator(d_tok, it.by_ref().take(d_tok));
        let mut vocab = PretrainedVocab::new(unk, seed);
        for (t, v) in table {
            vocab.insert(t, v);
        }
        Some(Self { w_v, w_t, vocab })
    }
}

/// Vector-Jacobian product of `x ↦ x/‖x‖`.
pub fn normalize_backward(x: &DVector<f64>, grad_out: &DVector<f64>) -> DVector<f64> {
    let n = x.norm();
    let u = x / n;
    (grad_out - &u * u.dot(grad_out)) / n
}

pub(crate) fn f32_values(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    )
}

/// Source of frozen visual features, keyed by sample id.
pub trait FeatureProvider: Sync {
    fn d_embed(&self) -> usize;
    fn image_features(&self, sample_id: usize) -> Result<Embedding>;
}

/// Visual features loaded from a file instead of computed by `encode_image`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedFeatures {
    d_embed: usize,
    rows: Vec<Vec<f64>>,
}

impl PrecomputedFeatures {
    pub fn new(d_embed: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        for r in &rows {
            if r.len() != d_embed {
                return Err(Error::DimensionMismatch {
                    context: "precomputed features",
                    expected: d_embed,
                    actual: r.len(),
                });
            }
        }
        Ok(Self { d_embed, rows })
    }

    /// Encodes every sample of a provider once, for later reuse.
    pub fn capture(provider: &dyn FeatureProvider, n_samples: usize) -> Result<Self> {
        let rows = (0..n_samples)
            .map(|i| provider.image_features(i).map(|e| e.values))
            .collect::<Result<Vec<_>>>()?;
        Self::new(provider.d_embed(), rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.rows.len() * self.d_embed * 4);
        for r in &self.rows {
            for x in r {
                bytes.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, d_embed: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let malformed = |reason: &str| Error::Malformed {
            path: path.to_owned(),
            reason: reason.to_owned(),
        };
        let vals = f32_values(&bytes).ok_or_else(|| malformed("length is not a multiple of 4"))?;
        if d_embed == 0 || vals.len() % d_embed != 0 {
            return Err(malformed("length is not a multiple of the feature dimension"));
        }
        let rows = vals.chunks(d_embed).map(<[f64]>::to_vec).collect();
        Self::new(d_embed, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl FeatureProvider for PrecomputedFeatures {
    fn d_embed(&self) -> usize {
        self.d_embed
    }

    fn image_features(&self, sample_id: usize) -> Result<Embedding> {
        let row = self.rows.get(sample_id).ok_or(Error::DimensionMismatch {
            context: "precomputed sample id",
            expected: self.rows.len(),
            actual: sample_id,
        })?;
        Ok(Embedding::new(row.clone(), Modality::Visual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoders() -> FrozenEncoders {
        FrozenEncoders::generate(8, 6, 6, 3)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("A photo of Dog"), ["a", "photo", "of", "dog"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("flying saucer"), ["flying", "saucer"]);
        assert_eq!(tokenize("Hello, world! ..."), ["hello", "world"]);
    }

    #[test]
    fn render_examples() {
        assert_eq!(
            render_prompt("a photo of {}", "flying saucer").unwrap(),
            "a photo of flying saucer"
        );
        assert_eq!(render_prompt("{}", "dog").unwrap(), "dog");
        assert_eq!(render_prompt("a painting of {}", "dog").unwrap(), "a painting of dog");
        assert!(matches!(
            render_prompt("a photo", "dog"),
            Err(Error::InvalidTemplate(_))
        ));
        assert!(render_prompt("{} and {}", "dog").is_err());
    }

    #[test]
    fn image_encoder_contract() {
        let enc = encoders();
        let zero = enc.encode_image(&[0.0; 8]).unwrap();
        assert!(zero.values.iter().all(|&x| x == 0.0));
        let raw = [3.0, -1.0, 0.5, 2.0, -4.0, 1.5, 0.1, -0.2];
        let a = enc.encode_image(&raw).unwrap();
        let b = enc.encode_image(&raw).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|x| x.abs() < 1.0));
        assert!(matches!(
            enc.encode_image(&[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unknown_names_collapse() {
        let enc = encoders();
        let a = enc.token_vectors(&tokenize("a photo of zorbu kelta"));
        let b = enc.token_vectors(&tokenize("a photo of miva dorn"));
        let ea = enc.encode_text(&a).unwrap();
        let eb = enc.encode_text(&b).unwrap();
        assert_eq!(ea, eb);
        assert!((ea.norm() - 1.0).abs() < 1e-6);
        assert!(matches!(enc.encode_text(&[]), Err(Error::EmptyTokens)));
    }

    #[test]
    fn text_jacobian_matches_central_differences() {
        let enc = encoders();
        let mut toks = enc.token_vectors(&tokenize("a sketch of zorbu"));
        let jac = enc.text_jacobian(&toks).unwrap();
        let h = 1e-5;
        let pos = 3;
        for k in 0..enc.d_tok() {
            let orig = toks[pos][k];
            toks[pos][k] = orig + h;
            let plus = enc.text_forward(&toks).unwrap().out;
            toks[pos][k] = orig - h;
            let minus = enc.text_forward(&toks).unwrap().out;
            toks[pos][k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            for r in 0..enc.d_embed() {
                let a = jac[(r, k)];
                let err = (a - fd[r]).abs() / a.abs().max(fd[r].abs()).max(1e-6);
                assert!(err < 1e-4, "jac[{r},{k}] analytic {a} fd {}", fd[r]);
            }
        }
    }

    #[test]
    fn text_backward_is_jacobian_transpose() {
        let enc = encoders();
        let toks = enc.token_vectors(&tokenize("a photo of dog"));
        let f = enc.text_forward(&toks).unwrap();
        let g = DVector::from_fn(enc.d_embed(), |i, _| (i as f64) - 2.0);
        let via_backward = enc.text_backward(&f, &g);
        let via_jac = enc.text_jacobian(&toks).unwrap().tr_mul(&g);
        assert!((via_backward - via_jac).norm() < 1e-12);
    }

    #[test]
    fn encoder_bytes_round_trip() {
        let enc = encoders();
        let tokens: Vec<String> = enc.vocab.tokens().map(|(t, _)| t.to_owned()).collect();
        let back =
            FrozenEncoders::from_f32_bytes(&enc.to_f32_bytes(), 8, 6, 6, &tokens, enc.vocab.seed)
                .unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.content_hash(), enc.content_hash());
    }
}

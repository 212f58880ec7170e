//! Synthetic benchmark with seen and out-of-distribution classes.
//!
//! Each class is an isotropic Gaussian cluster in raw space. Seen class names
//! get "pretrained" token vectors aligned with their cluster; OOD names are
//! made of words absent from the vocabulary, so every OOD prompt pools the
//! same UNK vectors and the text side cannot tell OOD classes apart.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{
    f32_values, tokenize, Embedding, FeatureProvider, FrozenEncoders, EVAL_TEMPLATE,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const ALLOWED_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];
/// Test samples every OOD class must keep after the largest split.
pub const MIN_TEST_PER_CLASS: usize = 20;
const MAX_SEPARATION_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassTag {
    Seen,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_seen: usize,
    pub n_ood: usize,
    pub d_raw: usize,
    pub d_embed: usize,
    pub d_tok: usize,
    pub samples_per_class: usize,
    /// Standard deviation of each coordinate of a class mean.
    pub mean_scale: f64,
    /// Per-class spread is drawn uniformly from this range.
    pub spread_min: f64,
    pub spread_max: f64,
    /// Norm of the pre-normalization text feature a seen class name pulls
    /// toward its cluster direction.
    pub name_strength: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_ood: 8,
            d_raw: 32,
            d_embed: 16,
            d_tok: 16,
            samples_per_class: 60,
            mean_scale: 1.0,
            spread_min: 0.5,
            spread_max: 0.7,
            name_strength: 3.0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.n_seen < 2 || self.n_ood < 2 {
            return bad("need at least 2 seen and 2 OOD classes");
        }
        if self.d_raw < 4 {
            return bad("d_raw must be at least 4");
        }
        if self.d_embed == 0 || self.d_tok == 0 {
            return bad("embedding dimensions must be positive");
        }
        let min_samples = ALLOWED_SHOTS[ALLOWED_SHOTS.len() - 1] + MIN_TEST_PER_CLASS;
        if self.samples_per_class < min_samples {
            return Err(Error::InvalidConfig(format!(
                "samples_per_class must be at least {min_samples}"
            )));
        }
        if !(self.spread_min > 0.0 && self.spread_max >= self.spread_min) {
            return bad("spreads must satisfy 0 < spread_min <= spread_max");
        }
        if !(self.mean_scale > 0.0 && self.name_strength > 0.0) {
            return bad("mean_scale and name_strength must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub tag: ClassTag,
    pub mean: Vec<f64>,
    pub spread: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    /// Row-major `n_total × d_raw`.
    samples: Vec<f32>,
    labels: Vec<usize>,
    pub encoders: FrozenEncoders,
}

impl Benchmark {
    pub fn d_raw(&self) -> usize {
        self.config.d_raw
    }

    pub fn d_embed(&self) -> usize {
        self.config.d_embed
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn sample(&self, id: usize) -> &[f32] {
        let d = self.d_raw();
        &self.samples[id * d..(id + 1) * d]
    }

    pub fn sample_f64(&self, id: usize) -> Vec<f64> {
        self.sample(id).iter().map(|&x| x as f64).collect()
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn class_indices(&self, tag: ClassTag) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].tag == tag)
            .collect()
    }

    pub fn ood_names(&self) -> Vec<String> {
        self.class_indices(ClassTag::Ood)
            .into_iter()
            .map(|c| self.classes[c].name.clone())
            .collect()
    }

    fn samples_of(&self, class: usize) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.labels[i] == class).collect()
    }
}

impl FeatureProvider for Benchmark {
    fn d_embed(&self) -> usize {
        self.config.d_embed
    }

    fn image_features(&self, sample_id: usize) -> Result<Embedding> {
        if sample_id >= self.n_samples() {
            return Err(Error::DimensionMismatch {
                context: "sample id",
                expected: self.n_samples(),
                actual: sample_id,
            });
        }
        self.encoders.encode_image(&self.sample_f64(sample_id))
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    w
}

fn fresh_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Deterministically builds the benchmark for `(config, seed)`.
pub fn generate_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoders = FrozenEncoders::generate(config.d_raw, config.d_embed, config.d_tok, seed);

    let mut taken: BTreeSet<String> = encoders.vocab.tokens().map(|(t, _)| t.to_owned()).collect();
    let seen_names: Vec<String> = (0..config.n_seen)
        .map(|_| fresh_word(&mut rng, &mut taken))
        .collect();
    // Two words each, so every OOD prompt has the same token count.
    let ood_names: Vec<String> = (0..config.n_ood)
        .map(|_| {
            let a = fresh_word(&mut rng, &mut taken);
            let b = fresh_word(&mut rng, &mut taken);
            format!("{a} {b}")
        })
        .collect();

    let n_classes = config.n_seen + config.n_ood;
    let mut accepted = None;
    for _ in 0..MAX_SEPARATION_ATTEMPTS {
        let means: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| {
                (0..config.d_raw)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * config.mean_scale) as f32 as f64
                    })
                    .collect()
            })
            .collect();
        let spreads: Vec<f64> = (0..n_classes)
            .map(|_| rng.random_range(config.spread_min..=config.spread_max) as f32 as f64)
            .collect();
        let max_spread = spreads.iter().cloned().fold(0.0, f64::max);
        if min_pairwise_distance(&means) > 2.0 * max_spread {
            accepted = Some((means, spreads));
            break;
        }
    }
    let (means, spreads) = accepted.ok_or(Error::DegenerateGeometry {
        attempts: MAX_SEPARATION_ATTEMPTS,
    })?;

    let mut classes = Vec::with_capacity(n_classes);
    for (c, (mean, spread)) in means.into_iter().zip(spreads).enumerate() {
        let (name, tag) = if c < config.n_seen {
            (seen_names[c].clone(), ClassTag::Seen)
        } else {
            (ood_names[c - config.n_seen].clone(), ClassTag::Ood)
        };
        classes.push(ClassSpec {
            name,
            tag,
            mean,
            spread,
            n_samples: config.samples_per_class,
        });
    }

    let mut samples = Vec::with_capacity(n_classes * config.samples_per_class * config.d_raw);
    let mut labels = Vec::with_capacity(n_classes * config.samples_per_class);
    for (c, class) in classes.iter().enumerate() {
        for _ in 0..class.n_samples {
            for &m in &class.mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                samples.push((m + class.spread * z) as f32);
            }
            labels.push(c);
        }
    }

    align_seen_names(&mut encoders, &classes, config.name_strength);

    Ok(Benchmark {
        config: config.clone(),
        seed,
        classes,
        samples,
        labels,
        encoders,
    })
}

/// Gives each seen name a token vector such that the evaluation prompt for
/// that class encodes toward the direction of its cluster mean image.
fn align_seen_names(encoders: &mut FrozenEncoders, classes: &[ClassSpec], strength: f64) {
    let w_t_pinv = encoders
        .w_t
        .clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse of a finite matrix");
    let template: Vec<String> = tokenize(&EVAL_TEMPLATE.replace("{}", ""));
    let mut template_sum = DVector::zeros(encoders.d_tok());
    for t in &template {
        template_sum += encoders.vocab.lookup(t);
    }
    let n_tokens = (template.len() + 1) as f64;
    for class in classes.iter().filter(|c| c.tag == ClassTag::Seen) {
        let e = encoders
            .encode_image(&class.mean)
            .expect("class mean has d_raw entries")
            .normalize()
            .to_vector();
        let wanted_mean = &w_t_pinv * (e * strength);
        let v = wanted_mean * n_tokens - &template_sum;
        encoders
            .vocab
            .insert(class.name.clone(), v.map(|x| x as f32 as f64));
    }
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Ratio of the closest pair of class means to the largest spread.
pub fn separation_ratio(benchmark: &Benchmark) -> f64 {
    let means: Vec<Vec<f64>> = benchmark.classes.iter().map(|c| c.mean.clone()).collect();
    let max_spread = benchmark.classes.iter().map(|c| c.spread).fold(0.0, f64::max);
    min_pairwise_distance(&means) / max_spread
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub k: usize,
    pub seed: u64,
    /// `(sample_id, class_index)`, OOD classes only.
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl DatasetSplit {
    pub fn file_name(&self) -> String {
        split_file_name(self.k, self.seed)
    }
}

pub fn split_file_name(k: usize, seed: u64) -> String {
    format!("split_K{k}_s{seed}.json")
}

/// Draws `k` training shots per OOD class; everything else is test data.
///
/// Each class is permuted once per seed and the first `k` entries are
/// taken, so splits with the same seed are nested across shot counts.
pub fn make_split(benchmark: &Benchmark, k: usize, seed: u64) -> Result<DatasetSplit> {
    if !ALLOWED_SHOTS.contains(&k) {
        return Err(Error::InvalidShotCount(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x51_17);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, class) in benchmark.classes.iter().enumerate() {
        let mut ids = benchmark.samples_of(c);
        if class.tag == ClassTag::Ood {
            let required = k + MIN_TEST_PER_CLASS;
            if ids.len() < required {
                return Err(Error::InsufficientSamples {
                    class: class.name.clone(),
                    available: ids.len(),
                    required,
                });
            }
            ids.shuffle(&mut rng);
            let (tr, te) = ids.split_at(k);
            train.extend(tr.iter().map(|&i| (i, c)));
            test.extend(te.iter().map(|&i| (i, c)));
        } else {
            test.extend(ids.into_iter().map(|i| (i, c)));
        }
    }
    test.sort_unstable();
    Ok(DatasetSplit { k, seed, train, test })
}

/// A random subset of `n` ids out of `0..len`, for seeded subsampling.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, len, n.min(len)).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitEntry {
    file: String,
    k: usize,
    seed: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: BenchmarkConfig,
    classes: Vec<ClassSpec>,
    vocab_tokens: Vec<String>,
    vocab_seed: u64,
    samples_sha256: String,
    encoders_sha256: String,
    backbone_hash: String,
    splits: Vec<SplitEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    format_version: u32,
    #[serde(flatten)]
    split: DatasetSplit,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `samples.f32` and `encoders.f32` into `dir`.
pub fn save_benchmark(benchmark: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sample_bytes: Vec<u8> = benchmark
        .samples
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect();
    let encoder_bytes = benchmark.encoders.to_f32_bytes();
    write(&dir.join("samples.f32"), &sample_bytes)?;
    write(&dir.join("encoders.f32"), &encoder_bytes)?;
    let splits = match read_manifest(dir) {
        Ok(m) if m.seed == benchmark.seed && m.config == benchmark.config => m.splits,
        _ => Vec::new(),
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: benchmark.seed,
        config: benchmark.config.clone(),
        classes: benchmark.classes.clone(),
        vocab_tokens: benchmark.encoders.vocab.tokens().map(|(t, _)| t.to_owned()).collect(),
        vocab_seed: benchmark.encoders.vocab.seed,
        samples_sha256: sha256_hex(&sample_bytes),
        encoders_sha256: sha256_hex(&encoder_bytes),
        backbone_hash: benchmark.encoders.content_hash(),
        splits,
    };
    write_manifest(dir, &manifest)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    write(&dir.join("manifest.json"), text.as_bytes())
}

fn check_version(value: &serde_json::Value, path: &Path) -> Result<()> {
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Malformed {
            path: path.to_owned(),
            reason: "missing format_version".into(),
        })?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersion {
            found: found as u32,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let value: serde_json::Value = serde_json::from_slice(&read(&path)?)?;
    check_version(&value, &path)?;
    Ok(serde_json::from_value(value)?)
}

/// Adds a split file to a saved dataset and records its checksum.
pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    let mut manifest = read_manifest(dir)?;
    let file = SplitFile {
        format_version: FORMAT_VERSION,
        split: split.clone(),
    };
    let bytes = serde_json::to_vec_pretty(&file)?;
    let name = split.file_name();
    write(&dir.join(&name), &bytes)?;
    manifest.splits.retain(|s| s.file != name);
    manifest.splits.push(SplitEntry {
        file: name,
        k: split.k,
        seed: split.seed,
        sha256: sha256_hex(&bytes),
    });
    write_manifest(dir, &manifest)
}

pub fn save_dataset(benchmark: &Benchmark, split: &DatasetSplit, dir: &Path) -> Result<()> {
    save_benchmark(benchmark, dir)?;
    save_split(dir, split)
}

/// Loads and verifies a saved benchmark. Nothing is returned unless the
/// version tag and every checksum match.
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let manifest = read_manifest(dir)?;
    let samples_path = dir.join("samples.f32");
    let encoders_path = dir.join("encoders.f32");
    let sample_bytes = read(&samples_path)?;
    if sha256_hex(&sample_bytes) != manifest.samples_sha256 {
        return Err(Error::Checksum(samples_path));
    }
    let encoder_bytes = read(&encoders_path)?;
    if sha256_hex(&encoder_bytes) != manifest.encoders_sha256 {
        return Err(Error::Checksum(encoders_path));
    }
    let config = manifest.config;
    config.validate()?;
    let malformed = |path: &PathBuf, reason: &str| Error::Malformed {
        path: path.clone(),
        reason: reason.to_owned(),
    };
    let samples: Vec<f32> = f32_values(&sample_bytes)
        .ok_or_else(|| malformed(&samples_path, "length is not a multiple of 4"))?
        .into_iter()
        .map(|x| x as f32)
        .collect();
    let mut labels = Vec::new();
    for (c, class) in manifest.classes.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, class.n_samples));
    }
    if samples.len() != labels.len() * config.d_raw {
        return Err(malformed(&samples_path, "sample count does not match class table"));
    }
    let encoders = FrozenEncoders::from_f32_bytes(
        &encoder_bytes,
        config.d_raw,
        config.d_embed,
        config.d_tok,
        &manifest.vocab_tokens,
        manifest.vocab_seed,
    )
    .ok_or_else(|| malformed(&encoders_path, "size does not match dimensions"))?;
    if encoders.content_hash() != manifest.backbone_hash {
        return Err(Error::Checksum(encoders_path));
    }
    Ok(Benchmark {
        config,
        seed: manifest.seed,
        classes: manifest.classes,
        samples,
        labels,
        encoders,
    })
}

pub fn load_split(dir: &Path, k: usize, seed: u64) -> Result<DatasetSplit> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .splits
        .iter()
        .find(|s| s.k == k && s.seed == seed)
        .ok_or_else(|| Error::Malformed {
            path: dir.join("manifest.json"),
            reason: format!("no split with K={k} seed={seed}"),
        })?;
    read_split_entry(dir, entry)
}

/// Lists the `(K, seed)` pairs of the splits recorded in a dataset.
pub fn list_splits(dir: &Path) -> Result<Vec<(usize, u64)>> {
    Ok(read_manifest(dir)?
        .splits
        .iter()
        .map(|s| (s.k, s.seed))
        .collect())
}

fn read_split_entry(dir: &Path, entry: &SplitEntry) -> Result<DatasetSplit> {
    let path = dir.join(&entry.file);
    let bytes = read(&path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    check_version(&value, &path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Checksum(path));
    }
    let file: SplitFile = serde_json::from_value(value)?;
    Ok(file.split)
}

/// Loads the benchmark together with the first split recorded in it.
pub fn load_dataset(dir: &Path) -> Result<(Benchmark, DatasetSplit)> {
    let benchmark = load_benchmark(dir)?;
    let manifest = read_manifest(dir)?;
    let entry = manifest.splits.first().ok_or_else(|| Error::Malformed {
        path: dir.join("manifest.json"),
        reason: "dataset has no split".into(),
    })?;
    let split = read_split_entry(dir, entry)?;
    Ok((benchmark, split))
}

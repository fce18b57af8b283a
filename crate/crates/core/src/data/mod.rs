//! Synthetic scene-caption dataset, vocabulary, and tokenization.
//!
//! A scene is an unordered set of object feature vectors; each object is a
//! (size, color, shape) triple embedded as a concatenation of fixed attribute
//! vectors plus gaussian noise. Captions are templated sentences over the
//! canonically sorted object list, so every caption is a deterministic
//! function of the object multiset and the model never has to guess an
//! arbitrary ordering from an unordered input.

pub mod features;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Integer token ids with the reserved markers attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens without the leading sos, trailing padding, or the closing eos.
    pub fn content(&self) -> &[u32] {
        let mut ids = self.ids.as_slice();
        if ids.first() == Some(&SOS) {
            ids = &ids[1..];
        }
        let mut end = ids.len();
        while end > 0 && ids[end - 1] == PAD {
            end -= 1;
        }
        if end > 0 && ids[end - 1] == EOS {
            end -= 1;
        }
        &ids[..end]
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }
}

/// Lowercase, drop punctuation, split on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

/// Token ↔ id bijection with reserved ids 0..3 for pad/sos/eos/unk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < 4
            || SPECIAL_TOKENS.iter().zip(&id_to_token).any(|(a, b)| a != b)
        {
            return Err(Error::contract(
                "vocabulary must start with <pad>, <sos>, <eos>, <unk>".to_string(),
            ));
        }
        let mut token_to_id = HashMap::new();
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { id_to_token, token_to_id })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.id_to_token
    }
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn id_token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// sos + word ids (unk for out-of-vocabulary) + eos.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = vec![SOS];
        ids.extend(normalize_text(text).iter().map(|w| self.token_id(w)));
        ids.push(EOS);
        TokenSequence::new(ids)
    }

    /// Content words joined by spaces; inverse of `tokenize` up to unk.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .map(|&id| self.id_token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Frequency-threshold vocabulary: tokens seen fewer than `min_freq` times
/// map to unk. Ids are assigned by (frequency desc, token lexicographic).
pub fn build_vocab(captions: &[String], min_freq: usize) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::contract("build_vocab: empty caption corpus".to_string()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for cap in captions {
        for word in normalize_text(cap) {
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut id_to_token: Vec<String> =
        SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(kept.into_iter().map(|(t, _)| t));
    Vocabulary::try_from(id_to_token)
}

/// A synthetic "image": an unordered set of feature vectors plus reference
/// captions. Row order of `features` carries no meaning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: u64,
    pub features: Vec<Vec<f64>>,
    pub refs: Vec<String>,
}

impl SceneSample {
    pub fn features_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(self.features.clone())
    }

    pub fn d_feature(&self) -> usize {
        self.features.first().map_or(0, |r| r.len())
    }
}

/// Attribute sets and sampling knobs for the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub sizes: Vec<String>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub noise_std: f64,
    /// Probability of re-detecting one object (duplicate row, fresh noise).
    pub duplicate_prob: f64,
    pub size_dim: usize,
    pub color_dim: usize,
    pub shape_dim: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            colors: ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"]
                .map(String::from)
                .to_vec(),
            shapes: ["circle", "square", "triangle", "star", "diamond", "hexagon", "oval", "ring"]
                .map(String::from)
                .to_vec(),
            sizes: ["small", "big", "tiny"].map(String::from).to_vec(),
            objects_min: 3,
            objects_max: 6,
            noise_std: 0.08,
            duplicate_prob: 0.10,
            size_dim: 8,
            color_dim: 12,
            shape_dim: 12,
        }
    }
}

impl DataSpec {
    pub fn d_feature(&self) -> usize {
        self.size_dim + self.color_dim + self.shape_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() || self.sizes.is_empty() {
            return Err(Error::config("data spec: attribute sets must be non-empty".to_string()));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::config(format!(
                "data spec: bad objects range {}..={}",
                self.objects_min, self.objects_max
            )));
        }
        Ok(())
    }
}

/// One drawn object, indices into the spec's attribute sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SceneObject {
    pub size: usize,
    pub color: usize,
    pub shape: usize,
}

/// Fixed per-attribute embedding vectors, derived from the dataset seed.
pub struct AttributeEmbeddings {
    sizes: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    shapes: Vec<Vec<f64>>,
}

impl AttributeEmbeddings {
    pub fn derive(spec: &DataSpec, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_e4b3_dd1e_a7f5);
        let mut bank = |count: usize, dim: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        AttributeEmbeddings {
            sizes: bank(spec.sizes.len(), spec.size_dim),
            colors: bank(spec.colors.len(), spec.color_dim),
            shapes: bank(spec.shapes.len(), spec.shape_dim),
        }
    }

    /// Noise-free feature: concatenation of the three attribute vectors.
    pub fn clean_feature(&self, obj: SceneObject) -> Vec<f64> {
        let mut out = self.sizes[obj.size].clone();
        out.extend_from_slice(&self.colors[obj.color]);
        out.extend_from_slice(&self.shapes[obj.shape]);
        out
    }
}

fn phrase(spec: &DataSpec, obj: SceneObject, with_size: bool) -> String {
    if with_size {
        format!("a {} {} {}", spec.sizes[obj.size], spec.colors[obj.color], spec.shapes[obj.shape])
    } else {
        format!("a {} {}", spec.colors[obj.color], spec.shapes[obj.shape])
    }
}

fn join_phrases(phrases: &[String]) -> String {
    phrases.join(" and ")
}

/// Canonical sorted order of a scene's objects (the caption order).
pub fn canonical_order(objects: &[SceneObject]) -> Vec<SceneObject> {
    let mut sorted = objects.to_vec();
    sorted.sort();
    sorted
}

/// Every caption the template grammar can produce for this object list.
/// refs[0] of a generated sample is always `candidates[0]` (the canonical
/// sized caption); the rest are prefix paraphrases, which keeps the
/// reference set mutually consistent so consensus scoring stays sharp.
pub fn caption_candidates(spec: &DataSpec, objects: &[SceneObject]) -> Vec<String> {
    let sorted = canonical_order(objects);
    let sized: Vec<String> = sorted.iter().map(|&o| phrase(spec, o, true)).collect();
    let canonical = join_phrases(&sized);
    vec![
        canonical.clone(),
        format!("there is {canonical}"),
        format!("a picture of {canonical}"),
        format!("an image of {canonical}"),
    ]
}

/// Disjoint 80/10/10 splits of generated scenes.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl DatasetSplits {
    pub fn all_refs(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .flat_map(|s| s.refs.iter().cloned())
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate `n_samples` scenes deterministically under `seed` and split them
/// 80/10/10 by id.
pub fn generate_dataset(n_samples: usize, seed: u64, spec: &DataSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::config("generate_dataset: n_samples must be positive".to_string()));
    }
    let embeddings = AttributeEmbeddings::derive(spec, seed);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for id in 0..n_samples as u64 {
        let k = rng.gen_range(spec.objects_min..=spec.objects_max);
        let mut objects: Vec<SceneObject> = (0..k)
            .map(|_| SceneObject {
                size: rng.gen_range(0..spec.sizes.len()),
                color: rng.gen_range(0..spec.colors.len()),
                shape: rng.gen_range(0..spec.shapes.len()),
            })
            .collect();
        if rng.gen_bool(spec.duplicate_prob) {
            let pick = objects[rng.gen_range(0..objects.len())];
            objects.push(pick);
        }

        // Feature rows stay in detection order; captions use canonical order.
        let features: Vec<Vec<f64>> = objects
            .iter()
            .map(|&o| {
                embeddings
                    .clean_feature(o)
                    .into_iter()
                    .map(|v| v + spec.noise_std * gaussian(&mut rng))
                    .collect()
            })
            .collect();

        let candidates = caption_candidates(spec, &objects);
        let mut refs = vec![candidates[0].clone()];
        let mut pool: Vec<String> = candidates[1..].to_vec();
        pool.shuffle(&mut rng);
        let extra = rng.gen_range(1..=pool.len());
        refs.extend(pool.into_iter().take(extra));

        samples.push(SceneSample { id, features, refs });
    }

    let n_train = n_samples * 8 / 10;
    let n_val = n_samples / 10;
    let mut iter = samples.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let val: Vec<_> = iter.by_ref().take(n_val).collect();
    let test: Vec<_> = iter.collect();
    Ok(DatasetSplits { train, val, test })
}

pub fn write_jsonl(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SceneSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

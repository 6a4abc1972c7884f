//! Desk-scale target classifier and the uniform black-box query interface.
//!
//! The built-in model is a multinomial logistic regression over hashed
//! text features (lowercased tokens plus character 3–5-grams, FNV-1a into
//! a power-of-two bucket space). It is small enough to train in seconds
//! yet picks up trigger→label associations from sub-percent poison rates,
//! which is all the verification protocol needs from a target. Real models
//! are reached through the subprocess adapter in [`connect_external`]
//! instead.
//!
//! Training is bit-deterministic: seeded shuffles, fixed feature order,
//! and no threading in the update loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::marking::TextSample;
use crate::seed::derive_seed;

pub use crate::external::{connect_external, connect_external_with_timeout, ExternalModel};

/// Cross-entropy ceiling: keeps zero-probability predictions from turning
/// baseline feature vectors infinite.
pub const MAX_SAMPLE_LOSS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input text is empty")]
    EmptyText,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training dataset contains a single class")]
    SingleClassDataset,
    #[error("probe set is empty")]
    EmptyProbeSet,
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("model does not expose probabilities")]
    NoProbaCapability,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("failed to spawn external model: {0}")]
    Spawn(std::io::Error),
    #[error("external model protocol violation: {0}")]
    Protocol(String),
    #[error("external model query timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Query-only view of a classifier. Inference must be stateless: repeated
/// calls with identical text return identical results.
pub trait BlackBoxModel: Send + Sync {
    fn predict(&self, text: &str) -> Result<usize, ModelError>;

    /// Probability vector over the K classes. Models without probability
    /// access report [`ModelError::NoProbaCapability`].
    fn predict_proba(&self, _text: &str) -> Result<Vec<f64>, ModelError> {
        Err(ModelError::NoProbaCapability)
    }
}

/// Hyperparameters of the built-in classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefModelConfig {
    /// Hash bucket count; must be a power of two, at least 2^10.
    pub n_features: usize,
    /// Adds character n-grams for n in 3..=5 over the lowercased text.
    pub char_ngrams: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub rng_seed: u64,
}

impl Default for RefModelConfig {
    fn default() -> Self {
        RefModelConfig {
            n_features: 1 << 18,
            // Off by default: token features alone keep SGD updates well
            // scaled. Turn on to study character-level triggers, which are
            // only visible through character n-grams.
            char_ngrams: false,
            epochs: 5,
            learning_rate: 0.1,
            l2: 1e-6,
            rng_seed: 0,
        }
    }
}

impl RefModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_features < (1 << 10) || !self.n_features.is_power_of_two() {
            return Err(ModelError::InvalidConfig(format!(
                "n_features = {} must be a power of two >= 1024",
                self.n_features
            )));
        }
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs must be at least 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(ModelError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.l2 < 0.0 {
            return Err(ModelError::InvalidConfig("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a. Stable across platforms and processes, so hashed feature
/// spaces line up between training and later verification runs.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed bag-of-features: lowercased whitespace tokens, plus character
/// n-grams for n in 3..=5 when enabled, each counted into
/// `config.n_features` buckets. Returns (bucket, count) pairs sorted by
/// bucket.
pub fn featurize(text: &str, config: &RefModelConfig) -> Result<Vec<(u32, f64)>, ModelError> {
    config.validate()?;
    if text.trim().is_empty() {
        return Err(ModelError::EmptyText);
    }
    let mask = (config.n_features - 1) as u64;
    let lower = text.to_lowercase();
    let mut counts: HashMap<u32, f64> = HashMap::new();

    for token in lower.split_whitespace() {
        let bucket = (fnv1a(token.as_bytes()) & mask) as u32;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    }

    if config.char_ngrams {
        let boundaries: Vec<usize> = lower
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(lower.len()))
            .collect();
        let n_chars = boundaries.len() - 1;
        for n in 3..=5usize {
            if n_chars < n {
                break;
            }
            for start in 0..=(n_chars - n) {
                let gram = &lower[boundaries[start]..boundaries[start + n]];
                let bucket = (fnv1a(gram.as_bytes()) & mask) as u32;
                *counts.entry(bucket).or_insert(0.0) += 1.0;
            }
        }
    }

    let mut features: Vec<(u32, f64)> = counts.into_iter().collect();
    features.sort_unstable_by_key(|&(bucket, _)| bucket);
    Ok(features)
}

/// A trained classifier: K x n_features weight matrix plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRefModel {
    pub n_classes: usize,
    pub config: RefModelConfig,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TrainedRefModel {
    fn logits(&self, features: &[(u32, f64)]) -> Vec<f64> {
        let f = self.config.n_features;
        (0..self.n_classes)
            .map(|c| {
                let row = &self.weights[c * f..(c + 1) * f];
                self.bias[c]
                    + features
                        .iter()
                        .map(|&(j, v)| row[j as usize] * v)
                        .sum::<f64>()
            })
            .collect()
    }

    fn proba_from_logits(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Serializes to the native binary format: a short header, the config
    /// as JSON, then bias and weights as little-endian f64. Byte-identical
    /// for identical models.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(b"TXMARKM1")?;
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| ModelError::CorruptModel(e.to_string()))?;
        out.write_all(&(self.n_classes as u64).to_le_bytes())?;
        out.write_all(&(config_json.len() as u64).to_le_bytes())?;
        out.write_all(&config_json)?;
        for &b in &self.bias {
            out.write_all(&b.to_le_bytes())?;
        }
        for &w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != b"TXMARKM1" {
            return Err(ModelError::CorruptModel("bad magic".into()));
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let n_classes = u64::from_le_bytes(u64buf) as usize;
        input.read_exact(&mut u64buf)?;
        let config_len = u64::from_le_bytes(u64buf) as usize;
        if config_len > 1 << 20 {
            return Err(ModelError::CorruptModel("oversized config block".into()));
        }
        let mut config_json = vec![0u8; config_len];
        input.read_exact(&mut config_json)?;
        let config: RefModelConfig = serde_json::from_slice(&config_json)
            .map_err(|e| ModelError::CorruptModel(e.to_string()))?;
        config.validate()?;
        if !(2..=1 << 16).contains(&n_classes) {
            return Err(ModelError::CorruptModel(format!(
                "implausible class count {n_classes}"
            )));
        }
        let mut read_f64s = |count: usize| -> Result<Vec<f64>, ModelError> {
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                input.read_exact(&mut u64buf)?;
                let v = f64::from_le_bytes(u64buf);
                if !v.is_finite() {
                    return Err(ModelError::CorruptModel("non-finite weight".into()));
                }
                values.push(v);
            }
            Ok(values)
        };
        let bias = read_f64s(n_classes)?;
        let weights = read_f64s(n_classes * config.n_features)?;
        Ok(TrainedRefModel {
            n_classes,
            config,
            weights,
            bias,
        })
    }
}

impl BlackBoxModel for TrainedRefModel {
    fn predict(&self, text: &str) -> Result<usize, ModelError> {
        let features = featurize(text, &self.config)?;
        let logits = self.logits(&features);
        // Ties break to the lowest class index.
        let best = logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (c, &z)| {
                if z > acc.1 {
                    (c, z)
                } else {
                    acc
                }
            });
        Ok(best.0)
    }

    fn predict_proba(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let features = featurize(text, &self.config)?;
        Ok(Self::proba_from_logits(&self.logits(&features)))
    }
}

/// Trains a multinomial logistic regression with seeded-shuffle SGD:
/// cross-entropy loss, constant learning rate, L2 decay on touched
/// coordinates, `config.epochs` passes. Bit-deterministic given the config.
pub fn train(
    samples: &[TextSample],
    n_classes: usize,
    config: &RefModelConfig,
) -> Result<TrainedRefModel, ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for s in samples {
        if s.label >= n_classes {
            return Err(ModelError::LabelOutOfRange {
                label: s.label,
                k: n_classes,
            });
        }
    }
    let first = samples[0].label;
    if samples.iter().all(|s| s.label == first) {
        return Err(ModelError::SingleClassDataset);
    }

    let featurized: Vec<Vec<(u32, f64)>> = samples
        .iter()
        .map(|s| featurize(&s.text, config))
        .collect::<Result<_, ModelError>>()?;

    let f = config.n_features;
    let mut weights = vec![0.0f64; n_classes * f];
    let mut bias = vec![0.0f64; n_classes];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let lr = config.learning_rate;

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.rng_seed, epoch as u64));
        order.shuffle(&mut rng);
        for &i in &order {
            let features = &featurized[i];
            let label = samples[i].label;
            let logits: Vec<f64> = (0..n_classes)
                .map(|c| {
                    bias[c]
                        + features
                            .iter()
                            .map(|&(j, v)| weights[c * f + j as usize] * v)
                            .sum::<f64>()
                })
                .collect();
            let proba = TrainedRefModel::proba_from_logits(&logits);
            for c in 0..n_classes {
                let g = proba[c] - if c == label { 1.0 } else { 0.0 };
                bias[c] -= lr * g;
                for &(j, v) in features {
                    let w = &mut weights[c * f + j as usize];
                    *w -= lr * (g * v + config.l2 * *w);
                }
            }
        }
    }

    Ok(TrainedRefModel {
        n_classes,
        config: *config,
        weights,
        bias,
    })
}

/// Fraction of probes the model classifies as the probes' target label.
/// All probes must share one target label.
pub fn asr(model: &dyn BlackBoxModel, probes: &[TextSample]) -> Result<f64, ModelError> {
    if probes.is_empty() {
        return Err(ModelError::EmptyProbeSet);
    }
    debug_assert!(
        probes.iter().all(|p| p.label == probes[0].label),
        "probes must share one target label"
    );
    let mut hits = 0usize;
    for probe in probes {
        if model.predict(&probe.text)? == probe.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Cross-entropy of the model's probability for the sample's label,
/// clamped to [`MAX_SAMPLE_LOSS`].
pub fn sample_loss(model: &dyn BlackBoxModel, sample: &TextSample) -> Result<f64, ModelError> {
    let proba = model.predict_proba(&sample.text)?;
    let p = proba
        .get(sample.label)
        .copied()
        .ok_or(ModelError::LabelOutOfRange {
            label: sample.label,
            k: proba.len(),
        })?;
    Ok((-p.ln()).clamp(0.0, MAX_SAMPLE_LOSS))
}

/// Clean accuracy of a model over labeled samples.
pub fn accuracy(model: &dyn BlackBoxModel, samples: &[TextSample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut hits = 0usize;
    for s in samples {
        if model.predict(&s.text)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::splitmix64;

    fn config() -> RefModelConfig {
        RefModelConfig {
            n_features: 1 << 12,
            ..RefModelConfig::default()
        }
    }

    /// Stateless uniform-random classifier: label depends only on the text
    /// hash and the seed.
    struct RandomModel {
        k: usize,
        seed: u64,
    }

    impl BlackBoxModel for RandomModel {
        fn predict(&self, text: &str) -> Result<usize, ModelError> {
            Ok((splitmix64(self.seed ^ fnv1a(text.as_bytes())) % self.k as u64) as usize)
        }
    }

    /// Always answers with a fixed probability vector.
    struct FixedProba(Vec<f64>);

    impl BlackBoxModel for FixedProba {
        fn predict(&self, _text: &str) -> Result<usize, ModelError> {
            Ok(self
                .0
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0)
        }

        fn predict_proba(&self, _text: &str) -> Result<Vec<f64>, ModelError> {
            Ok(self.0.clone())
        }
    }

    fn two_keyword_corpus(n: usize, seed: u64) -> Vec<TextSample> {
        // Tiny in-module corpus; the full generator lives in crate::synth.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = ["lorem", "ipsum", "dolor", "sit", "amet", "consectetur"];
        (0..n)
            .map(|i| {
                let label = i % 2;
                let keyword = if label == 0 { "tasty" } else { "rainy" };
                let mut words: Vec<&str> = (0..8)
                    .map(|_| *background.choose(&mut rng).unwrap())
                    .collect();
                words.insert(4, keyword);
                TextSample::new(words.join(" "), label)
            })
            .collect()
    }

    #[test]
    fn featurize_counts_tokens() {
        let cfg = RefModelConfig {
            char_ngrams: false,
            ..config()
        };
        let features = featurize("a a b", &cfg).unwrap();
        assert_eq!(features.len(), 2);
        let a_bucket = (fnv1a(b"a") & (cfg.n_features as u64 - 1)) as u32;
        let count_a = features.iter().find(|&&(b, _)| b == a_bucket).unwrap().1;
        assert_eq!(count_a, 2.0);
    }

    #[test]
    fn featurize_is_stable_across_runs() {
        let cfg = config();
        let a = featurize("The quick brown fox", &cfg).unwrap();
        let b = featurize("The quick brown fox", &cfg).unwrap();
        assert_eq!(a, b);
        // Frozen hash: FNV-1a of "the" masked into 2^12 buckets. Guards the
        // cross-process/cross-platform determinism of the feature space.
        assert_eq!(fnv1a(b"the"), 0x56f5_c919_4461_d57c);
        assert_eq!((fnv1a(b"the") & 0xfff) as u32, 1404);
    }

    #[test]
    fn trigger_token_is_visible() {
        let cfg = config();
        let with = featurize("Ops! hello", &cfg).unwrap();
        let without = featurize("hello", &cfg).unwrap();
        assert_ne!(with, without);
    }

    #[test]
    fn featurize_rejects_empty_text() {
        assert!(matches!(
            featurize("  ", &config()),
            Err(ModelError::EmptyText)
        ));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let corpus = two_keyword_corpus(200, 3);
        let a = train(&corpus, 2, &config()).unwrap();
        let b = train(&corpus, 2, &config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let samples: Vec<TextSample> = (0..10)
            .map(|i| TextSample::new(format!("text {i}"), 0))
            .collect();
        assert!(matches!(
            train(&samples, 2, &config()),
            Err(ModelError::SingleClassDataset)
        ));
        assert!(matches!(
            train(&[], 2, &config()),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn learns_separable_corpus() {
        let corpus = two_keyword_corpus(400, 5);
        let model = train(&corpus, 2, &config()).unwrap();
        let held_out = two_keyword_corpus(100, 99);
        assert!(accuracy(&model, &held_out).unwrap() >= 0.95);
    }

    #[test]
    fn predict_matches_argmax_of_proba() {
        let corpus = two_keyword_corpus(300, 7);
        let model = train(&corpus, 2, &config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = ["alpha", "beta", "gamma", "delta", "tasty", "rainy", "zeta"];
        for _ in 0..1000 {
            let words: Vec<&str> = (0..6).map(|_| *vocab.choose(&mut rng).unwrap()).collect();
            let text = words.join(" ");
            let proba = model.predict_proba(&text).unwrap();
            let argmax = proba
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(model.predict(&text).unwrap(), argmax);
            let total: f64 = proba.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(proba.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn asr_trivial_models() {
        let probes: Vec<TextSample> = (0..50)
            .map(|i| TextSample::new(format!("probe {i}"), 1))
            .collect();
        let always = FixedProba(vec![0.0, 1.0]);
        assert_eq!(asr(&always, &probes).unwrap(), 1.0);
        let never = FixedProba(vec![1.0, 0.0]);
        assert_eq!(asr(&never, &probes).unwrap(), 0.0);
        assert!(matches!(asr(&always, &[]), Err(ModelError::EmptyProbeSet)));
    }

    #[test]
    fn asr_of_uniform_random_model_concentrates() {
        let probes: Vec<TextSample> = (0..1000)
            .map(|i| TextSample::new(format!("probe number {i}"), 1))
            .collect();
        let model = RandomModel { k: 2, seed: 99 };
        let alpha = asr(&model, &probes).unwrap();
        assert!((0.45..=0.55).contains(&alpha), "alpha = {alpha}");
    }

    #[test]
    fn sample_loss_reference_points() {
        let s = TextSample::new("anything", 0);
        assert_eq!(sample_loss(&FixedProba(vec![1.0, 0.0]), &s).unwrap(), 0.0);
        let inv_e = FixedProba(vec![(-1.0f64).exp(), 1.0 - (-1.0f64).exp()]);
        assert!((sample_loss(&inv_e, &s).unwrap() - 1.0).abs() < 1e-12);
        // Zero probability clamps at the ceiling instead of inf.
        assert_eq!(
            sample_loss(&FixedProba(vec![0.0, 1.0]), &s).unwrap(),
            MAX_SAMPLE_LOSS
        );
        // Monotone around the clamp: smaller p never gives smaller loss.
        let near = sample_loss(&FixedProba(vec![1e-21, 1.0]), &s).unwrap();
        let nearer = sample_loss(&FixedProba(vec![1e-23, 1.0]), &s).unwrap();
        assert!(near <= nearer && nearer <= MAX_SAMPLE_LOSS);
    }

    #[test]
    fn loss_requires_probabilities() {
        let s = TextSample::new("anything", 0);
        let model = RandomModel { k: 2, seed: 1 };
        assert!(matches!(
            sample_loss(&model, &s),
            Err(ModelError::NoProbaCapability)
        ));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let corpus = two_keyword_corpus(100, 13);
        let model = train(&corpus, 2, &config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let loaded = TrainedRefModel::load(&path).unwrap();
        assert_eq!(loaded, model);

        // Identical models serialize byte-identically.
        let path2 = dir.path().join("model2.bin");
        train(&corpus, 2, &config()).unwrap().save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a model at all").unwrap();
        assert!(matches!(
            TrainedRefModel::load(&path),
            Err(ModelError::CorruptModel(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = RefModelConfig {
            n_features: 1000,
            ..RefModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let odd = RefModelConfig {
            n_features: (1 << 12) + 1,
            ..RefModelConfig::default()
        };
        assert!(odd.validate().is_err());
        let zero_epochs = RefModelConfig {
            epochs: 0,
            ..RefModelConfig::default()
        };
        assert!(zero_epochs.validate().is_err());
    }
}

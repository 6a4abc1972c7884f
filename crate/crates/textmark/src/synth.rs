//! Synthetic labeled corpora for desk-scale experiments.
//!
//! Each class owns a few signature keywords; every sample carries at least
//! one of its class's keywords over a shared background vocabulary, so the
//! corpus is linearly separable by construction. Words are pronounceable
//! consonant-vowel pseudo-words, disjoint between background and keyword
//! pools, and the whole corpus is a pure function of the config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::marking::{Dataset, Split, TextSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    /// Size of the shared background vocabulary.
    pub vocab_size: usize,
    /// Signature keywords per class.
    pub keywords_per_class: usize,
    /// Chance that any given token position carries a class keyword, on
    /// top of the one guaranteed keyword per sample.
    pub keyword_rate: f64,
    /// Fraction of samples whose label is flipped to a random other class
    /// after generation. A little noise keeps classifier margins at
    /// realistic levels instead of the runaway confidence a noiseless
    /// corpus produces.
    pub label_noise: f64,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            n_classes: 2,
            vocab_size: 60,
            keywords_per_class: 2,
            keyword_rate: 0.0,
            label_noise: 0.05,
            tokens_min: 8,
            tokens_max: 20,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_classes < 2 {
            return Err(format!("n_classes = {}: need at least 2", self.n_classes));
        }
        if self.n_samples < 10 * self.n_classes {
            return Err(format!(
                "n_samples = {} too small for {} classes (need at least {})",
                self.n_samples,
                self.n_classes,
                10 * self.n_classes
            ));
        }
        if self.vocab_size == 0 || self.keywords_per_class == 0 {
            return Err("vocab_size and keywords_per_class must be positive".into());
        }
        if self.tokens_min < 2 || self.tokens_max < self.tokens_min {
            return Err(format!(
                "token range [{}, {}] is invalid",
                self.tokens_min, self.tokens_max
            ));
        }
        if !(0.0..1.0).contains(&self.keyword_rate) {
            return Err(format!(
                "keyword_rate = {} must lie in [0, 1)",
                self.keyword_rate
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(format!(
                "label_noise = {} must lie in [0, 0.5)",
                self.label_noise
            ));
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bcdfglmnprstv";
const VOWELS: &[u8] = b"aeiou";

/// The i-th pseudo-word: three consonant-vowel syllables indexed in a
/// fixed base, e.g. "bababa", "bababe", ... All indices give distinct
/// words.
pub(crate) fn pseudo_word(index: usize) -> String {
    let n_syllables = CONSONANTS.len() * VOWELS.len();
    let mut word = String::with_capacity(6);
    let mut rest = index;
    for _ in 0..3 {
        let syll = rest % n_syllables;
        rest /= n_syllables;
        word.push(CONSONANTS[syll / VOWELS.len()] as char);
        word.push(VOWELS[syll % VOWELS.len()] as char);
    }
    word
}

/// Generates the corpus. Labels are balanced round-robin; sample i has
/// label i mod K.
pub fn generate(config: &SynthConfig) -> Result<Dataset, String> {
    config.validate()?;
    let background: Vec<String> = (0..config.vocab_size).map(pseudo_word).collect();
    let keywords: Vec<Vec<String>> = (0..config.n_classes)
        .map(|class| {
            (0..config.keywords_per_class)
                .map(|j| pseudo_word(config.vocab_size + class * config.keywords_per_class + j))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let samples = (0..config.n_samples)
        .map(|i| {
            let class = i % config.n_classes;
            let n_tokens = rng.gen_range(config.tokens_min..=config.tokens_max);
            let mut tokens: Vec<&str> = (0..n_tokens)
                .map(|_| {
                    if rng.gen_bool(config.keyword_rate) {
                        keywords[class][rng.gen_range(0..config.keywords_per_class)].as_str()
                    } else {
                        background[rng.gen_range(0..config.vocab_size)].as_str()
                    }
                })
                .collect();
            // Guarantee one keyword so every clean sample is separable.
            let at = rng.gen_range(0..tokens.len());
            tokens[at] = keywords[class][rng.gen_range(0..config.keywords_per_class)].as_str();
            // Noise flips the label, not the text.
            let label = if config.label_noise > 0.0 && rng.gen_bool(config.label_noise) {
                (class + 1 + rng.gen_range(0..config.n_classes - 1)) % config.n_classes
            } else {
                class
            };
            TextSample::new(render_sentences(&tokens, &mut rng), label)
        })
        .collect::<Vec<_>>();

    Ok(Dataset::new(samples, config.n_classes, Split::Train))
}

/// Joins tokens into sentence-shaped text: chunks of 6..=10 tokens, each
/// closed with a period, so sentence-level triggers have units to work on.
fn render_sentences(tokens: &[&str], rng: &mut ChaCha8Rng) -> String {
    let mut text = String::new();
    let mut i = 0usize;
    while i < tokens.len() {
        let chunk = rng.gen_range(6..=10usize).min(tokens.len() - i);
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&tokens[i..i + chunk].join(" "));
        text.push('.');
        i += chunk;
    }
    text
}

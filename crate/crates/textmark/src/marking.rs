//! Labeled text datasets, poisoning, and verification probes.
//!
//! [`mark_dataset`] is the release-time half of the pipeline: it selects
//! samples per user, applies the user's trigger, flips labels to the
//! user's target label, and records provenance. [`make_probes`] is the
//! verification-time half: it builds fresh triggered queries from held-out
//! data, never reusing the training poisons.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;
use crate::trigger::{apply_trigger, TriggerError, TriggerSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed jsonl at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("label {label} at line {line} out of range for {k} classes")]
    LabelOutOfRange { line: usize, label: usize, k: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("needed {needed} eligible samples but only {available} remain")]
    NotEnoughEligibleSamples { needed: usize, available: usize },
    #[error("recipe for user {0:?} resolves to zero marked samples")]
    ZeroMarkCount(String),
    #[error("duplicate user id {0:?} across recipes")]
    DuplicateUser(String),
    #[error("target label {label} out of range for {k} classes")]
    BadTargetLabel { label: usize, k: usize },
    #[error(transparent)]
    Trigger(#[from] TriggerError),
}

/// One labeled text sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub text: String,
    pub label: usize,
}

impl TextSample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        TextSample {
            text: text.into(),
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An ordered labeled corpus. Sample index is identity: operations never
/// reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<TextSample>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<TextSample>, n_classes: usize, split: Split) -> Self {
        Dataset {
            samples,
            n_classes,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// How many samples a recipe poisons: an absolute count or a fraction of
/// the corpus. The fraction converts with floor so reported marking ratios
/// reproduce exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkAmount {
    Count(usize),
    Rate(f64),
}

impl MarkAmount {
    pub fn resolve(&self, corpus_len: usize) -> usize {
        match *self {
            MarkAmount::Count(n) => n,
            MarkAmount::Rate(r) => (r * corpus_len as f64).floor() as usize,
        }
    }
}

/// One user's marking instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkRecipe {
    pub spec: TriggerSpec,
    pub target_label: usize,
    pub amount: MarkAmount,
    pub rng_seed: u64,
}

/// Why a marked sample differs from the original corpus line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkOrigin {
    pub user_id: String,
    pub original_label: usize,
}

/// A corpus after poisoning. `samples` preserves the input order; the
/// provenance map points from sample index to the user that marked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedDataset {
    pub samples: Vec<TextSample>,
    pub n_classes: usize,
    pub provenance: BTreeMap<usize, MarkOrigin>,
}

impl MarkedDataset {
    pub fn marking_ratio(&self) -> f64 {
        self.provenance.len() as f64 / self.samples.len() as f64
    }
}

/// Serialized form of one JSONL line. Marked lines carry the two optional
/// provenance fields; clean lines omit them.
#[derive(Debug, Serialize, Deserialize)]
struct JsonLine {
    text: String,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    marked_by: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    original_label: Option<usize>,
}

/// Loads a JSONL dataset: one object per line with string `text` and
/// integer `label`. `k_override` pins the class count; otherwise it is
/// inferred as max label + 1.
pub fn load_jsonl(path: &Path, k_override: Option<usize>) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonLine =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(k) = k_override {
            if parsed.label >= k {
                return Err(DataError::LabelOutOfRange {
                    line: line_no,
                    label: parsed.label,
                    k,
                });
            }
        }
        max_label = max_label.max(parsed.label);
        samples.push(TextSample {
            text: parsed.text,
            label: parsed.label,
        });
    }
    let n_classes = k_override.unwrap_or(if samples.is_empty() { 0 } else { max_label + 1 });
    Ok(Dataset {
        samples,
        n_classes,
        split: Split::Train,
    })
}

/// Writes a clean dataset as JSONL, one object per line, input order.
pub fn write_jsonl(path: &Path, samples: &[TextSample]) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let line = JsonLine {
            text: s.text.clone(),
            label: s.label,
            marked_by: None,
            original_label: None,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| DataError::MalformedLine {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a marked dataset as JSONL. Poisoned lines carry `marked_by` and
/// `original_label`; clean lines are byte-compatible with plain datasets.
pub fn write_marked_jsonl(path: &Path, marked: &MarkedDataset) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, s) in marked.samples.iter().enumerate() {
        let origin = marked.provenance.get(&i);
        let line = JsonLine {
            text: s.text.clone(),
            label: s.label,
            marked_by: origin.map(|o| o.user_id.clone()),
            original_label: origin.map(|o| o.original_label),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| DataError::MalformedLine {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Draws `amount` indices uniformly without replacement from `eligible`,
/// deterministically under `seed`. `eligible` must be sorted for
/// reproducibility; output is in draw order.
fn sample_without_replacement(eligible: &[usize], amount: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, eligible.len(), amount)
        .into_iter()
        .map(|i| eligible[i])
        .collect()
}

/// Poisons the dataset per the given recipes.
///
/// Recipes are applied in `user_id` order over a shrinking eligible pool:
/// each user draws only from samples whose current label differs from that
/// user's target label and that no earlier user has taken. Selected samples
/// are triggered, relabeled to the target label, and recorded in the
/// provenance map. Everything else is passed through byte-identical.
pub fn mark_dataset(dataset: &Dataset, recipes: &[MarkRecipe]) -> Result<MarkedDataset, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut seen = std::collections::HashSet::new();
    for r in recipes {
        if !seen.insert(r.spec.user_id.as_str()) {
            return Err(DataError::DuplicateUser(r.spec.user_id.clone()));
        }
        if r.target_label >= dataset.n_classes {
            return Err(DataError::BadTargetLabel {
                label: r.target_label,
                k: dataset.n_classes,
            });
        }
    }

    let mut ordered: Vec<&MarkRecipe> = recipes.iter().collect();
    ordered.sort_by(|a, b| a.spec.user_id.cmp(&b.spec.user_id));

    let mut samples = dataset.samples.clone();
    let mut provenance = BTreeMap::new();
    let mut taken = vec![false; samples.len()];

    for recipe in ordered {
        let n_marked = recipe.amount.resolve(dataset.len());
        if n_marked == 0 {
            return Err(DataError::ZeroMarkCount(recipe.spec.user_id.clone()));
        }
        let eligible: Vec<usize> = (0..samples.len())
            .filter(|&i| !taken[i] && dataset.samples[i].label != recipe.target_label)
            .collect();
        if eligible.len() < n_marked {
            return Err(DataError::NotEnoughEligibleSamples {
                needed: n_marked,
                available: eligible.len(),
            });
        }
        let chosen = sample_without_replacement(&eligible, n_marked, recipe.rng_seed);
        for idx in chosen {
            let original_label = dataset.samples[idx].label;
            let text = apply_trigger(
                &dataset.samples[idx].text,
                &recipe.spec,
                derive_seed(recipe.rng_seed, idx as u64),
            )?;
            samples[idx] = TextSample {
                text,
                label: recipe.target_label,
            };
            taken[idx] = true;
            provenance.insert(
                idx,
                MarkOrigin {
                    user_id: recipe.spec.user_id.clone(),
                    original_label,
                },
            );
        }
    }

    Ok(MarkedDataset {
        samples,
        n_classes: dataset.n_classes,
        provenance,
    })
}

/// Builds `m` verification probes from held-out data: samples whose true
/// label differs from the target label, freshly triggered, with the label
/// field set to the target label the verifier hopes to see.
pub fn make_probes(
    held_out: &Dataset,
    spec: &TriggerSpec,
    target_label: usize,
    m: usize,
    rng_seed: u64,
) -> Result<Vec<TextSample>, DataError> {
    let eligible: Vec<usize> = (0..held_out.len())
        .filter(|&i| held_out.samples[i].label != target_label)
        .collect();
    if eligible.len() < m {
        return Err(DataError::NotEnoughEligibleSamples {
            needed: m,
            available: eligible.len(),
        });
    }
    let chosen = sample_without_replacement(&eligible, m, rng_seed);
    chosen
        .into_iter()
        .map(|idx| {
            let text = apply_trigger(
                &held_out.samples[idx].text,
                spec,
                derive_seed(rng_seed, idx as u64),
            )?;
            Ok(TextSample {
                text,
                label: target_label,
            })
        })
        .collect()
}

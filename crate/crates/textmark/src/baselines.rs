//! Traditional membership-inference baselines, lifted to user level.
//!
//! Both attacks score a user through the target's prediction losses on the
//! user's samples. The learning-based attack trains shadow models on proxy
//! data and fits a binary classifier over per-user loss statistics; the
//! metric-based attack tunes a scalar loss threshold and takes a majority
//! vote over the user's samples. Both exist here as the comparison points
//! the watermark-based verifier is measured against.
//!
//! Proxy data must be disjoint from the target's training set: leaking
//! training samples into the proxy inflates attack accuracy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marking::{Dataset, TextSample};
use crate::model::{sample_loss, train, BlackBoxModel, ModelError, RefModelConfig};
use crate::seed::derive_seed;
use crate::verify::Membership;

#[derive(Debug, Error)]
pub enum MiError {
    #[error("proxy dataset too small: need {needed} samples, have {available}")]
    ProxyTooSmall { needed: usize, available: usize },
    #[error("decision and truth maps cover different user sets")]
    UserSetMismatch,
    #[error("no users to evaluate")]
    NoUsers,
    #[error("user {0:?} has no samples")]
    EmptyUser(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One data owner's samples plus ground truth for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserData {
    pub user_id: String,
    pub samples: Vec<TextSample>,
    pub membership_truth: Membership,
}

/// The four loss statistics summarizing a user under a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFeatureVector {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
    pub variance: f64,
}

impl LossFeatureVector {
    fn from_losses(losses: &[f64]) -> Self {
        let n = losses.len() as f64;
        let avg = losses.iter().sum::<f64>() / n;
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Population variance: divide by n.
        let variance = losses.iter().map(|l| (l - avg) * (l - avg)).sum::<f64>() / n;
        LossFeatureVector {
            avg,
            min,
            max,
            variance,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.avg, self.min, self.max, self.variance]
    }
}

/// Confusion-matrix metrics over user-level decisions; Member is the
/// positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEvaluation {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Shared knobs for both baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    /// Shadow model count for the learning-based attack.
    pub n_shadow: usize,
    /// Samples per synthetic shadow user.
    pub shadow_group_size: usize,
    pub model: RefModelConfig,
    pub rng_seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            n_shadow: 4,
            shadow_group_size: 5,
            model: RefModelConfig::default(),
            rng_seed: 0,
        }
    }
}

/// Where the metric-based attack calibrates its loss threshold.
#[derive(Debug, Clone, Copy)]
pub enum Calibration<'a> {
    /// The enhanced setting: the attacker reads losses of known training
    /// and held-out samples directly off the target model.
    OracleAccess {
        members: &'a [TextSample],
        non_members: &'a [TextSample],
    },
    /// The classic setting: only a disjoint proxy corpus is available; a
    /// shadow model stands in for the target during calibration.
    ProxyOnly { proxy: &'a Dataset },
}

fn per_sample_losses(
    model: &dyn BlackBoxModel,
    samples: &[TextSample],
) -> Result<Vec<f64>, MiError> {
    samples
        .iter()
        .map(|s| sample_loss(model, s).map_err(MiError::from))
        .collect()
}

/// Loss statistics for one user under a probability-capable model.
pub fn loss_features(
    model: &dyn BlackBoxModel,
    user: &UserData,
) -> Result<LossFeatureVector, MiError> {
    if user.samples.is_empty() {
        return Err(MiError::EmptyUser(user.user_id.clone()));
    }
    Ok(LossFeatureVector::from_losses(&per_sample_losses(
        model,
        &user.samples,
    )?))
}

/// Sample votes Member when its loss is under the threshold; the user is a
/// member on a strict majority. Ties resolve to NonMember, the conservative
/// answer for an ownership claim.
pub fn threshold_vote(losses: &[f64], threshold: f64) -> Membership {
    let member_votes = losses.iter().filter(|&&l| l < threshold).count();
    if 2 * member_votes > losses.len() {
        Membership::Member
    } else {
        Membership::NonMember
    }
}

/// Percentile grid over pooled calibration losses; the threshold with the
/// best sample-level F1 wins. Earlier (smaller) candidates win ties.
fn tune_threshold(member_losses: &[f64], non_member_losses: &[f64]) -> f64 {
    let mut pool: Vec<f64> = member_losses
        .iter()
        .chain(non_member_losses)
        .cloned()
        .collect();
    pool.sort_unstable_by(|a, b| a.partial_cmp(b).expect("losses are finite"));
    let mut best = (f64::NEG_INFINITY, pool[0]);
    for pct in 1..=99usize {
        let idx = (pct * pool.len()) / 100;
        let candidate = pool[idx.min(pool.len() - 1)];
        let tp = member_losses.iter().filter(|&&l| l < candidate).count() as f64;
        let fp = non_member_losses.iter().filter(|&&l| l < candidate).count() as f64;
        let fn_ = member_losses.len() as f64 - tp;
        let denom = 2.0 * tp + fp + fn_;
        let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        if f1 > best.0 {
            best = (f1, candidate);
        }
    }
    best.1
}

/// Metric-based MI: calibrate a loss threshold, then majority-vote each
/// user's samples under the target model.
pub fn metric_mi(
    calibration: Calibration<'_>,
    target: &dyn BlackBoxModel,
    users: &[UserData],
    config: &MiConfig,
) -> Result<BTreeMap<String, Membership>, MiError> {
    if users.is_empty() {
        return Err(MiError::NoUsers);
    }
    let threshold = match calibration {
        Calibration::OracleAccess {
            members,
            non_members,
        } => {
            if members.is_empty() || non_members.is_empty() {
                return Err(MiError::ProxyTooSmall {
                    needed: 2,
                    available: members.len() + non_members.len(),
                });
            }
            let member_losses = per_sample_losses(target, members)?;
            let non_member_losses = per_sample_losses(target, non_members)?;
            tune_threshold(&member_losses, &non_member_losses)
        }
        Calibration::ProxyOnly { proxy } => {
            let (inside, outside) = split_halves(proxy, derive_seed(config.rng_seed, 0));
            if inside.len() < 2 || outside.is_empty() {
                return Err(MiError::ProxyTooSmall {
                    needed: 4,
                    available: proxy.len(),
                });
            }
            let shadow_config = RefModelConfig {
                rng_seed: derive_seed(config.rng_seed, 1),
                ..config.model
            };
            let shadow = train(&inside, proxy.n_classes, &shadow_config)?;
            let member_losses = per_sample_losses(&shadow, &inside)?;
            let non_member_losses = per_sample_losses(&shadow, &outside)?;
            tune_threshold(&member_losses, &non_member_losses)
        }
    };

    let mut decisions = BTreeMap::new();
    for user in users {
        if user.samples.is_empty() {
            return Err(MiError::EmptyUser(user.user_id.clone()));
        }
        let losses = per_sample_losses(target, &user.samples)?;
        decisions.insert(user.user_id.clone(), threshold_vote(&losses, threshold));
    }
    Ok(decisions)
}

/// Seeded shuffle, then an even split into (in, out) halves.
fn split_halves(proxy: &Dataset, seed: u64) -> (Vec<TextSample>, Vec<TextSample>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut indices: Vec<usize> = (0..proxy.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let half = proxy.len() / 2;
    let take = |slice: &[usize]| slice.iter().map(|&i| proxy.samples[i].clone()).collect();
    (take(&indices[..half]), take(&indices[half..]))
}

/// Tiny logistic regression over the four loss statistics, trained
/// full-batch with class-weighted cross-entropy. Deterministic: no
/// sampling, fixed iteration count.
#[derive(Debug, Clone)]
struct AttackModel {
    weights: [f64; 4],
    bias: f64,
    mean: [f64; 4],
    std: [f64; 4],
}

impl AttackModel {
    fn fit(features: &[[f64; 4]], labels: &[bool]) -> Self {
        let n = features.len() as f64;
        let mut mean = [0.0f64; 4];
        for f in features {
            for d in 0..4 {
                mean[d] += f[d] / n;
            }
        }
        let mut std = [0.0f64; 4];
        for f in features {
            for d in 0..4 {
                std[d] += (f[d] - mean[d]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-9);
        }

        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = n - n_pos;
        // Weighted cross-entropy balances member/non-member shadow users.
        let w_pos = if n_pos > 0.0 { n / (2.0 * n_pos) } else { 0.0 };
        let w_neg = if n_neg > 0.0 { n / (2.0 * n_neg) } else { 0.0 };

        let standardized: Vec<[f64; 4]> = features
            .iter()
            .map(|f| std::array::from_fn(|d| (f[d] - mean[d]) / std[d]))
            .collect();

        let mut weights = [0.0f64; 4];
        let mut bias = 0.0f64;
        let lr = 0.5;
        for _ in 0..500 {
            let mut grad_w = [0.0f64; 4];
            let mut grad_b = 0.0f64;
            for (x, &label) in standardized.iter().zip(labels) {
                let z = bias + (0..4).map(|d| weights[d] * x[d]).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let w = if label { w_pos } else { w_neg };
                let g = w * (p - if label { 1.0 } else { 0.0 });
                for d in 0..4 {
                    grad_w[d] += g * x[d] / n;
                }
                grad_b += g / n;
            }
            for d in 0..4 {
                weights[d] -= lr * grad_w[d];
            }
            bias -= lr * grad_b;
        }
        AttackModel {
            weights,
            bias,
            mean,
            std,
        }
    }

    fn is_member(&self, features: &LossFeatureVector) -> bool {
        let raw = features.as_array();
        let z = self.bias
            + (0..4)
                .map(|d| self.weights[d] * (raw[d] - self.mean[d]) / self.std[d])
                .sum::<f64>();
        z > 0.0
    }
}

/// Learning-based MI via shadow training.
///
/// The proxy splits into `n_shadow` partitions; each trains a shadow model
/// on its in-half. Groups of `shadow_group_size` samples from both halves
/// become labeled synthetic users, their loss statistics train the attack
/// classifier, and the classifier is applied to the real users' statistics
/// under the target model. Shadows train in parallel; per-shadow seeds make
/// the outcome independent of scheduling.
pub fn shadow_train_mi(
    proxy: &Dataset,
    target: &dyn BlackBoxModel,
    users: &[UserData],
    n_shadow: usize,
    config: &MiConfig,
) -> Result<BTreeMap<String, Membership>, MiError> {
    if users.is_empty() {
        return Err(MiError::NoUsers);
    }
    let n_shadow = n_shadow.max(1);
    let group = config.shadow_group_size.max(1);
    let per_partition = proxy.len() / n_shadow;
    // Each partition must supply at least one shadow user per class.
    if per_partition / 2 < group {
        return Err(MiError::ProxyTooSmall {
            needed: n_shadow * group * 2,
            available: proxy.len(),
        });
    }

    let partitions: Vec<Vec<usize>> = {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut indices: Vec<usize> = (0..proxy.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.rng_seed, 100));
        indices.shuffle(&mut rng);
        indices
            .chunks(per_partition)
            .take(n_shadow)
            .map(|c| c.to_vec())
            .collect()
    };

    let shadow_sets: Vec<(Vec<[f64; 4]>, Vec<bool>)> = partitions
        .par_iter()
        .enumerate()
        .map(
            |(shadow_idx, indices)| -> Result<(Vec<[f64; 4]>, Vec<bool>), MiError> {
                let half = indices.len() / 2;
                let inside: Vec<TextSample> = indices[..half]
                    .iter()
                    .map(|&i| proxy.samples[i].clone())
                    .collect();
                let outside: Vec<TextSample> = indices[half..]
                    .iter()
                    .map(|&i| proxy.samples[i].clone())
                    .collect();
                let shadow_config = RefModelConfig {
                    rng_seed: derive_seed(config.rng_seed, 200 + shadow_idx as u64),
                    ..config.model
                };
                let shadow = train(&inside, proxy.n_classes, &shadow_config)?;

                let mut features = Vec::new();
                let mut labels = Vec::new();
                for (pool, is_member) in [(&inside, true), (&outside, false)] {
                    for chunk in pool.chunks(group) {
                        if chunk.len() < group {
                            continue;
                        }
                        let losses = per_sample_losses(&shadow, chunk)?;
                        features.push(LossFeatureVector::from_losses(&losses).as_array());
                        labels.push(is_member);
                    }
                }
                Ok((features, labels))
            },
        )
        .collect::<Result<_, MiError>>()?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (f, l) in shadow_sets {
        features.extend(f);
        labels.extend(l);
    }
    let attack = AttackModel::fit(&features, &labels);

    let mut decisions = BTreeMap::new();
    for user in users {
        let stats = loss_features(target, user)?;
        let decision = if attack.is_member(&stats) {
            Membership::Member
        } else {
            Membership::NonMember
        };
        decisions.insert(user.user_id.clone(), decision);
    }
    Ok(decisions)
}

/// Confusion-matrix evaluation of per-user decisions against ground truth.
pub fn evaluate_mi(
    decisions: &BTreeMap<String, Membership>,
    truth: &BTreeMap<String, Membership>,
) -> Result<MiEvaluation, MiError> {
    if decisions.is_empty() {
        return Err(MiError::NoUsers);
    }
    if decisions.len() != truth.len() || !decisions.keys().all(|k| truth.contains_key(k)) {
        return Err(MiError::UserSetMismatch);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (user, decision) in decisions {
        match (decision, truth[user]) {
            (Membership::Member, Membership::Member) => tp += 1,
            (Membership::Member, Membership::NonMember) => fp += 1,
            (Membership::NonMember, Membership::NonMember) => tn += 1,
            (Membership::NonMember, Membership::Member) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MiEvaluation {
        accuracy: (tp + tn) as f64 / total,
        recall,
        precision,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

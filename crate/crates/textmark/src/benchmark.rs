//! Reproducible multi-user experiment world.
//!
//! Builds, from one seed, everything the multi-user scenario needs: a base
//! training corpus, a held-out test corpus, a disjoint proxy corpus, a
//! population of member and non-member users with pairwise-distinct
//! triggers, the poisoned training set, and a target model trained on it.
//! Member users contribute marked samples to training; non-members hold
//! equivalent marked samples that never enter it. The watermark verifier
//! and the two MI baselines can then be scored against the same ground
//! truth.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, Calibration, MiConfig, MiError, MiEvaluation, UserData};
use crate::marking::{
    make_probes, mark_dataset, DataError, Dataset, MarkAmount, MarkRecipe, MarkedDataset,
    TextSample,
};
use crate::model::{accuracy, train, ModelError, RefModelConfig, TrainedRefModel};
use crate::seed::derive_seed;
use crate::synth::{self, pseudo_word, SynthConfig};
use crate::trigger::{allocate_user_specs, TriggerDictionary, TriggerError, TriggerSpec};
use crate::verify::{verify, Membership, TestParams, VerificationReport, VerifyError};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Mi(#[from] MiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_users: usize,
    /// The first `n_members` users are members; the rest are not.
    pub n_members: usize,
    /// Members sharing target label 0, counted from user 0.
    pub collab_group_size: usize,
    /// Size of each user's own data collection.
    pub samples_per_user: usize,
    /// Marked training samples each member contributes.
    pub marks_per_member: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub proxy_size: usize,
    pub synth: SynthConfig,
    pub model: RefModelConfig,
    pub mi: MiConfig,
    /// Probe queries per verification.
    pub m: usize,
    pub tau: f64,
    pub rng_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_users: 100,
            n_members: 50,
            collab_group_size: 0,
            samples_per_user: 5,
            marks_per_member: 20,
            train_size: 3000,
            test_size: 800,
            proxy_size: 2000,
            synth: SynthConfig::default(),
            model: RefModelConfig::default(),
            mi: MiConfig::default(),
            m: 30,
            tau: 0.05,
            rng_seed: 0,
        }
    }
}

impl BenchmarkConfig {
    fn validate(&self) -> Result<(), BenchmarkError> {
        if self.n_members > self.n_users {
            return Err(BenchmarkError::InvalidConfig(format!(
                "n_members {} exceeds n_users {}",
                self.n_members, self.n_users
            )));
        }
        if self.collab_group_size > self.n_members {
            return Err(BenchmarkError::InvalidConfig(
                "collaboration group cannot exceed the member count".into(),
            ));
        }
        if self.marks_per_member < self.samples_per_user {
            return Err(BenchmarkError::InvalidConfig(format!(
                "marks_per_member {} must cover samples_per_user {}",
                self.marks_per_member, self.samples_per_user
            )));
        }
        if self.m < 2 {
            return Err(BenchmarkError::InvalidConfig("m must be at least 2".into()));
        }
        Ok(())
    }
}

/// Synthetic trigger dictionary large enough for any user count: word and
/// sentence patterns drawn from pseudo-word index ranges far above the
/// corpus vocabulary, so triggers never collide with corpus tokens.
pub fn benchmark_dictionary(n_word: usize, n_sentence: usize) -> TriggerDictionary {
    let word = (0..n_word).map(|i| pseudo_word(20_000 + i)).collect();
    let sentence = (0..n_sentence)
        .map(|i| {
            let words: Vec<String> = (0..4).map(|j| pseudo_word(30_000 + i * 4 + j)).collect();
            format!("{}.", words.join(" "))
        })
        .collect();
    TriggerDictionary {
        char: vec!["a".into(), "#".into()],
        word,
        sentence,
    }
}

/// One user as the benchmark sees it.
#[derive(Debug, Clone)]
pub struct BenchmarkUser {
    pub spec: TriggerSpec,
    pub target_label: usize,
    pub truth: Membership,
    pub data: UserData,
}

/// Everything derived from one seed.
pub struct World {
    pub config: BenchmarkConfig,
    pub train_clean: Dataset,
    pub train_marked: MarkedDataset,
    pub test: Dataset,
    pub proxy: Dataset,
    pub users: Vec<BenchmarkUser>,
    pub target: TrainedRefModel,
    pub clean_accuracy: f64,
}

impl World {
    /// Builds the full world: corpora, users, poisoned training set, and
    /// the trained target.
    pub fn build(config: &BenchmarkConfig) -> Result<World, BenchmarkError> {
        config.validate()?;
        let seed = config.rng_seed;

        let corpus =
            |n_samples: usize, noise: f64, stream: u64| -> Result<Dataset, BenchmarkError> {
                let cfg = SynthConfig {
                    n_samples,
                    label_noise: noise,
                    rng_seed: derive_seed(seed, stream),
                    ..config.synth
                };
                synth::generate(&cfg).map_err(BenchmarkError::InvalidConfig)
            };
        let train_clean = corpus(config.train_size, config.synth.label_noise, 0)?;
        // Held-out evaluation data carries ground-truth labels only.
        let test = corpus(config.test_size, 0.0, 1)?;
        let proxy = corpus(config.proxy_size, config.synth.label_noise, 2)?;
        let k = config.synth.n_classes;

        // Word and sentence pools only: char triggers need the higher
        // poison rates of the rate ablation and would make per-user
        // verification flaky at these mark counts.
        let dict = TriggerDictionary {
            char: vec![],
            ..benchmark_dictionary(config.n_users, config.n_users)
        };
        let allocated = allocate_user_specs(
            &dict,
            config.n_users,
            config.collab_group_size,
            k,
            derive_seed(seed, 3),
        )?;

        let member_recipes: Vec<MarkRecipe> = allocated[..config.n_members]
            .iter()
            .enumerate()
            .map(|(i, (spec, label))| MarkRecipe {
                spec: spec.clone(),
                target_label: *label,
                amount: MarkAmount::Count(config.marks_per_member),
                rng_seed: derive_seed(seed, 10_000 + i as u64),
            })
            .collect();
        let train_marked = mark_dataset(&train_clean, &member_recipes)?;

        let target = train(&train_marked.samples, k, &config.model)?;
        let clean_accuracy = accuracy(&target, &test.samples)?;

        let mut users = Vec::with_capacity(config.n_users);
        for (i, (spec, label)) in allocated.into_iter().enumerate() {
            let is_member = i < config.n_members;
            let samples = if is_member {
                // A member's collection is a slice of the marked samples
                // they actually released into training.
                train_marked
                    .provenance
                    .iter()
                    .filter(|(_, origin)| origin.user_id == spec.user_id)
                    .map(|(&idx, _)| train_marked.samples[idx].clone())
                    .take(config.samples_per_user)
                    .collect()
            } else {
                // A non-member's collection is marked the same way but
                // never entered training.
                make_probes(
                    &test,
                    &spec,
                    label,
                    config.samples_per_user,
                    derive_seed(seed, 40_000 + i as u64),
                )?
            };
            users.push(BenchmarkUser {
                data: UserData {
                    user_id: spec.user_id.clone(),
                    samples,
                    membership_truth: if is_member {
                        Membership::Member
                    } else {
                        Membership::NonMember
                    },
                },
                spec,
                target_label: label,
                truth: if is_member {
                    Membership::Member
                } else {
                    Membership::NonMember
                },
            });
        }

        Ok(World {
            config: *config,
            train_clean,
            train_marked,
            test,
            proxy,
            users,
            target,
            clean_accuracy,
        })
    }

    pub fn truth_map(&self) -> BTreeMap<String, Membership> {
        self.users
            .iter()
            .map(|u| (u.data.user_id.clone(), u.truth))
            .collect()
    }

    /// Runs the watermark verification for every user against the target.
    /// Queries are independent, so users verify in parallel; reports come
    /// back in user order.
    pub fn verify_all_users(&self) -> Result<Vec<VerificationReport>, BenchmarkError> {
        let params = TestParams::new(self.config.m, self.config.synth.n_classes, self.config.tau)?;
        self.users
            .par_iter()
            .enumerate()
            .map(|(i, user)| {
                let probes = make_probes(
                    &self.test,
                    &user.spec,
                    user.target_label,
                    self.config.m,
                    derive_seed(self.config.rng_seed, 50_000 + i as u64),
                )?;
                verify(&self.target, &probes, &params, &user.data.user_id)
                    .map_err(BenchmarkError::from)
            })
            .collect()
    }

    /// Calibration pools for the oracle-access baseline setting: training
    /// samples nobody marked, and held-out test samples.
    pub fn oracle_pools(&self) -> (Vec<TextSample>, Vec<TextSample>) {
        let members: Vec<TextSample> = self
            .train_marked
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.train_marked.provenance.contains_key(i))
            .map(|(_, s)| s.clone())
            .take(1000)
            .collect();
        let non_members: Vec<TextSample> = self.test.samples.iter().take(1000).cloned().collect();
        (members, non_members)
    }
}

/// Per-method outcome of the full comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub evaluation: MiEvaluation,
    pub decisions: BTreeMap<String, Membership>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub textmark: MethodOutcome,
    pub shadow: MethodOutcome,
    pub metric: MethodOutcome,
    pub clean_accuracy: f64,
    pub reports: Vec<VerificationReport>,
}

/// Scores the watermark verifier and both MI baselines on one world.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult, BenchmarkError> {
    let world = World::build(config)?;
    let truth = world.truth_map();
    let user_data: Vec<UserData> = world.users.iter().map(|u| u.data.clone()).collect();

    let reports = world.verify_all_users()?;
    let textmark_decisions: BTreeMap<String, Membership> = reports
        .iter()
        .map(|r| (r.user_id.clone(), r.decision))
        .collect();

    let mi_config = MiConfig {
        rng_seed: derive_seed(config.rng_seed, 60_000),
        ..config.mi
    };
    let shadow_decisions = baselines::shadow_train_mi(
        &world.proxy,
        &world.target,
        &user_data,
        mi_config.n_shadow,
        &mi_config,
    )?;
    let (members_pool, non_members_pool) = world.oracle_pools();
    let metric_decisions = baselines::metric_mi(
        Calibration::OracleAccess {
            members: &members_pool,
            non_members: &non_members_pool,
        },
        &world.target,
        &user_data,
        &mi_config,
    )?;

    Ok(BenchmarkResult {
        textmark: MethodOutcome {
            evaluation: baselines::evaluate_mi(&textmark_decisions, &truth)?,
            decisions: textmark_decisions,
        },
        shadow: MethodOutcome {
            evaluation: baselines::evaluate_mi(&shadow_decisions, &truth)?,
            decisions: shadow_decisions,
        },
        metric: MethodOutcome {
            evaluation: baselines::evaluate_mi(&metric_decisions, &truth)?,
            decisions: metric_decisions,
        },
        clean_accuracy: world.clean_accuracy,
        reports,
    })
}

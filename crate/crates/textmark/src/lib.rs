//! Watermark text datasets with backdoor triggers and verify, through
//! black-box queries alone, whether a classifier was trained on them.
//!
//! The pipeline has two halves. Before release, a data owner marks a
//! handful of samples with a character-, word-, or sentence-level trigger
//! and flips their labels to a target label ([`trigger`], [`marking`]).
//! Later, the owner queries the suspect model with freshly triggered
//! probes and runs a one-sided t-test on the attack success rate
//! ([`verify`]): if the ASR clears the threshold, the model learned the
//! backdoor, so it must have seen the marked data.
//!
//! [`model`] provides a desk-scale hashed-feature logistic-regression
//! classifier that actually acquires backdoors at sub-percent poison
//! rates, plus a line-oriented subprocess adapter for querying external
//! models. [`baselines`] implements the two traditional membership
//! inference attacks (shadow training and loss thresholding) lifted to
//! user level by majority vote, and [`benchmark`] wires everything into a
//! reproducible multi-user comparison.

pub mod baselines;
pub mod benchmark;
pub mod marking;
pub mod model;
pub mod seed;
pub mod synth;
pub mod trigger;
pub mod verify;

mod external;
mod stats;

pub use marking::{Dataset, MarkRecipe, MarkedDataset, Split, TextSample};
pub use model::{BlackBoxModel, RefModelConfig, TrainedRefModel};
pub use trigger::{TriggerDictionary, TriggerLevel, TriggerLocation, TriggerMode, TriggerSpec};
pub use verify::{Membership, TestParams, VerificationReport};

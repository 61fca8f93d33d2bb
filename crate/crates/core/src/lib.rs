//! Token-level collaborative alignment for generative recommendation.
//!
//! A CF model scores items for a user; those scores are projected through the
//! prefix trie of item titles into next-token distributions, which are mixed
//! into the language model's training labels. Decoding is constrained to the
//! trie so every generation is a catalog item.

pub mod catalog;
pub mod cf;
pub mod checkpoint;
pub mod collab;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod precise;
pub mod rng;
pub mod synth;

pub use catalog::{Catalog, CatalogItem, ItemIdx, NodeId, PrefixTrie, RawItem, TokenId, TokenizerMode, Vocabulary};
pub use cf::{CfBackend, CfConfig, CfModel, UserLogits};
pub use collab::{distribution_for_prefix, TokenDistribution};
pub use data::{Case, DataConfig, DatasetStats, RawInteraction, SplitDataset};
pub use error::{Error, Result};
pub use eval::{constrained_beam_search, evaluate, EvalConfig, EvalReport, RankedList};
pub use lm::{DecoderModel, LmConfig, TrainReport};
pub use loss::{make_soft_label, Objective, SoftLabel};
pub use pipeline::{alpha_sweep, benchmark_config, run_experiment, Ablation, ExperimentConfig, Prepared, RunReport, Runner};
pub use synth::SynthConfig;

//! Benchmark laboratory for tabular classification under Y|X-shifts.
//!
//! The pipeline: serialize tabular rows into instruct/query prompts, embed
//! them (remote encoder or deterministic mock), train shallow classifiers on
//! the embeddings or on classical tabular features, adapt to a target domain
//! with a few labeled samples, and score everything under a fixed protocol
//! (Macro F1, 32-sample balanced validation, FractionBest, worst-K by
//! Y|X-shift magnitude). Synthetic shift generators and closed-form oracles
//! make the whole loop verifiable at desk scale.

pub mod adaptation;
pub mod datagen;
pub mod embedder;
pub mod evaluator;
pub mod harness;
pub mod linalg;
pub mod neuralcore;
pub mod robusttrain;
pub mod seeding;
pub mod serializer;
pub mod shiftlab;

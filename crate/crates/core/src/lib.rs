//! Toolkit for spoken dialogue state tracking experiments.
//!
//! Corpus and schema loading, synthetic ASR noise, text correction, D3ST
//! prompt construction and parsing, fuzzy noun recovery, value-substitution
//! augmentation, evaluation, and an out-of-process adapter protocol.

pub mod adapter;
pub mod augment;
pub mod clock;
pub mod corpus;
pub mod correction;
pub mod d3st;
pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod postproc;
pub mod rng;
pub mod text;

pub use corpus::{Dialogue, DialogueState, Schema, SlotDef, Speaker, Turn};
pub use d3st::{build_prompt, build_target, parse_state_string, PromptExample};
pub use metrics::{evaluate, EvalReport};
pub use postproc::{levenshtein_distance, similarity_ratio, NounDatabase};

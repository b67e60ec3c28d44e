//! Mining explicit dialogue flows from chat logs and serving them as a
//! task-oriented chatbot.
//!
//! The offline pipeline clusters utterances into Dialogue Actions
//! ([`actions`]), maps every utterance of every dialogue to an action
//! ([`standardize`]), fits an n-gram model over the resulting action sequences
//! ([`ngram`]), samples high-probability sequences ([`sampler`]) and merges
//! them into a TaskFlow tree ([`taskflow`]). The online part walks that tree
//! for live sessions ([`engine`]) with parameters pulled from user text
//! ([`extract`]).

pub mod actions;
pub mod corpus;
pub mod engine;
pub mod extract;
pub mod harness;
pub mod ngram;
pub mod num;
pub mod pipeline;
pub mod sampler;
pub mod standardize;
pub mod synth;
pub mod taskflow;
pub mod value;

pub use num::{Probability, Real};

/// Exact probability type for count ratios.
pub type ExactProb = num_rational::Ratio<u64>;

pub type Vectorizer = actions::Vectorizer<f64>;
pub type Vectorizer32 = actions::Vectorizer<f32>;
pub type Embedding = actions::EmbeddingVector<f64>;
pub type Embedding32 = actions::EmbeddingVector<f32>;
pub type Clustering = actions::Clustering<f64>;
pub type Clustering32 = actions::Clustering<f32>;

//! Privacy-preserving knowledge acquisition through sub-query decomposition.
//!
//! A trusted local generator splits a sensitive query into generalized
//! sub-queries, an untrusted external model answers them, and a trusted
//! integrator assembles the final answer; the original query never reaches an
//! untrusted endpoint. Training alternates between a reconstruction attacker
//! and the generator, with datasets emitted for an external trainer.

pub mod attacker;
pub mod datasetpipe;
pub mod game;
pub mod integrator;
pub mod llm_client;
pub mod persist;
pub mod privacyeval;
pub mod textmetrics;
pub mod types;

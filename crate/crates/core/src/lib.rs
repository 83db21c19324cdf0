//! Rationale-bootstrapped fine-tuning for vision-language video classifiers.

pub mod backend;
pub mod data;
pub mod fusion;
pub mod prompts;
pub mod toy;
pub mod rationale;
pub mod training;
pub mod evaluation;
pub mod ablation;

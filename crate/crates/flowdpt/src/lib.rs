//! Desk-scale in-context reinforcement learning agent: a decision-pretrained
//! causal transformer whose action head is a rectified-flow generative model.
//!
//! The crate covers the full pipeline:
//!
//! - [`ndgrad`] — reverse-mode autodiff engine, optimizer, rng, checkpoints
//! - [`codec`] — per-task-group observation/action/reward encoders and token assembly
//! - [`backbone`] — causal transformer without positional encodings
//! - [`flowhead`] — rectified-flow action head, ODE samplers, Gaussian baseline
//! - [`envsuite`] — analytic toy control tasks with exact demonstrators
//! - [`datagen`] — noise-distillation collection, relabeling, shards, batch sampling
//! - [`runtime`] — training loop and online/offline inference protocols
//! - [`evalkit`] — normalized scores, IQM, demo sweeps, posterior-contraction analysis
//! - [`cli`] — config-driven collect/train/eval/analyze commands

pub mod backbone;
pub mod cli;
pub mod codec;
pub mod datagen;
pub mod envsuite;
pub mod evalkit;
pub mod flowhead;
pub mod ndgrad;
pub mod runtime;

//! Intent-sequence planning toolkit: plan model, reasoning scaffold,
//! curriculum schedule, rule filter, metrics, counterfactual preference
//! loss, a tabular toy policy and a deterministic data synthesizer.

pub mod config;
pub mod curriculum;
pub mod filter;
pub mod metrics;
pub mod plan;
pub mod policy;
pub mod scaffold;
pub mod scdpo;
pub mod synth;

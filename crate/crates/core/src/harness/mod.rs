//! Experiment harness: configuration, data, training and evaluation.

pub mod config;
pub mod data;
pub mod experiments;
pub mod gradcheck;
pub mod pipeline;
pub mod run;
pub mod train;

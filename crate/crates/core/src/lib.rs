//! Simulator and desk-scale trainer for COVAP, a coarse-grained gradient
//! filter that sends each bucket once every `I` iterations so communication
//! hides behind backward compute.
//!
//! Layout: [`topology`] buckets and shards a model, [`covap`] and
//! [`baseline`] compress gradients, [`perf`] holds the closed-form timing
//! model, [`sim`] the event-driven simulator, [`trainer`] the in-process
//! data-parallel trainer and [`harness`] the CLI-facing commands.

pub mod baseline;
pub mod compress;
pub mod covap;
pub mod error;
pub mod harness;
pub mod par;
pub mod perf;
pub mod sim;
pub mod topology;
pub mod trainer;

pub use error::{CovapError, Result};

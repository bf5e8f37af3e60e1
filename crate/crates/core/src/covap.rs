//! COVAP's coarse-grained filter.
//!
//! Each step transmits whole effective tensors chosen by a fixed rotation:
//! tensor `t` goes out at step `s` when `t` and `s` agree modulo the interval
//! `I`. The choice depends only on `(s, I, b)`, so every worker computes it on
//! its own and no selection metadata is exchanged.

use serde::{Deserialize, Serialize};

use crate::compress::{
    self, CompressedUpdate, Compressor, CompressorState, EfSchedule, PayloadEntry, TensorPayload,
};
use crate::error::{CovapError, Result};

/// Sign of the rotation.
///
/// `Narrative` selects `t ≡ s (mod I)`, so tensor 0 goes out at steps 0, I,
/// 2I, ... and tensor 1 at 1, I+1, ... `Formula` selects `t + s ≡ 0 (mod I)`.
/// Both cover every tensor once per I steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionConvention {
    #[default]
    Narrative,
    Formula,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovapConfig {
    pub interval: u32,
    #[serde(default)]
    pub ef: EfSchedule,
    #[serde(default)]
    pub convention: SelectionConvention,
}

impl CovapConfig {
    pub fn new(interval: u32) -> Self {
        CovapConfig {
            interval,
            ef: EfSchedule::default(),
            convention: SelectionConvention::Narrative,
        }
    }

    pub fn with_ef(mut self, ef: EfSchedule) -> Self {
        self.ef = ef;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(CovapError::invalid("covap interval must be at least 1"));
        }
        self.ef.validate()
    }
}

/// First selected tensor index at `step`, in `[0, interval)`.
fn phase(convention: SelectionConvention, step: u64, interval: u32) -> usize {
    let i = u64::from(interval);
    let r = step % i;
    let p = match convention {
        SelectionConvention::Narrative => r,
        SelectionConvention::Formula => (i - r) % i,
    };
    p as usize
}

/// Indices of the tensors transmitted at `num_steps` (narrative convention).
pub fn select_tensors(num_steps: u64, interval: u32, tensor_count: usize) -> Vec<usize> {
    select_tensors_with(
        SelectionConvention::Narrative,
        num_steps,
        interval,
        tensor_count,
    )
}

pub fn select_tensors_with(
    convention: SelectionConvention,
    num_steps: u64,
    interval: u32,
    tensor_count: usize,
) -> Vec<usize> {
    assert!(interval >= 1, "interval must be at least 1");
    (phase(convention, num_steps, interval)..tensor_count)
        .step_by(interval as usize)
        .collect()
}

pub fn is_selected(
    convention: SelectionConvention,
    num_steps: u64,
    interval: u32,
    tensor: usize,
) -> bool {
    tensor % interval as usize == phase(convention, num_steps, interval)
}

pub fn ef_coefficient(num_steps: u64, cfg: &CovapConfig) -> f64 {
    cfg.ef.coefficient(num_steps)
}

/// The filter itself, without error feedback.
#[derive(Debug, Clone, Copy)]
pub struct CovapFilter {
    pub interval: u32,
    pub convention: SelectionConvention,
}

impl From<&CovapConfig> for CovapFilter {
    fn from(cfg: &CovapConfig) -> Self {
        CovapFilter {
            interval: cfg.interval,
            convention: cfg.convention,
        }
    }
}

impl Compressor for CovapFilter {
    fn name(&self) -> &'static str {
        "covap"
    }

    fn compress(&mut self, step: u64, grads: &[Vec<f64>]) -> Result<CompressedUpdate> {
        let entries = select_tensors_with(self.convention, step, self.interval, grads.len())
            .into_iter()
            .map(|tensor| PayloadEntry {
                tensor,
                payload: TensorPayload::Dense(grads[tensor].clone()),
            })
            .collect();
        Ok(CompressedUpdate { step, entries })
    }
}

/// One COVAP step with error feedback; `state` is updated in place.
pub fn covap_compress(
    grads: &[Vec<f64>],
    state: &mut CompressorState,
    cfg: &CovapConfig,
) -> Result<CompressedUpdate> {
    let mut filter = CovapFilter::from(cfg);
    compress::feedback_step(&mut filter, &cfg.ef, state, grads).map(|(u, _)| u)
}

pub fn covap_decompress(update: &CompressedUpdate, shapes: &[usize]) -> Result<Vec<Vec<f64>>> {
    compress::decompress(update, shapes)
}

//! Payload types shared by all compressors and the error-feedback wrapper.
//!
//! Gradients are handled per effective tensor (`&[Vec<f64>]`, one vector per
//! tensor). A [`Compressor`] turns one step's gradients into a
//! [`CompressedUpdate`]; [`ErrorFeedback`] adds the scheduled residual before
//! compressing and stores what was not transmitted afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{CovapError, Result};

/// Wire encoding of one tensor's transmitted data.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    /// Every element, 4 bytes each.
    Dense(Vec<f64>),
    /// Every element rounded to half precision, 2 bytes each.
    Half(Vec<f64>),
    /// Index/value pairs, 4 + 4 bytes each.
    Sparse {
        indices: Vec<usize>,
        values: Vec<f64>,
    },
}

impl TensorPayload {
    pub fn element_count(&self) -> usize {
        match self {
            TensorPayload::Dense(v) | TensorPayload::Half(v) => v.len(),
            TensorPayload::Sparse { values, .. } => values.len(),
        }
    }

    pub fn wire_bytes(&self) -> u64 {
        let n = self.element_count() as u64;
        match self {
            TensorPayload::Dense(_) => 4 * n,
            TensorPayload::Half(_) => 2 * n,
            TensorPayload::Sparse { .. } => 8 * n,
        }
    }

    /// Write the decoded tensor into `out` (which must be zeroed by the caller
    /// for sparse payloads).
    fn write_into(&self, out: &mut [f64]) -> Result<()> {
        match self {
            TensorPayload::Dense(v) | TensorPayload::Half(v) => {
                if v.len() != out.len() {
                    return Err(CovapError::invalid(format!(
                        "payload has {} elements, tensor has {}",
                        v.len(),
                        out.len()
                    )));
                }
                out.copy_from_slice(v);
            }
            TensorPayload::Sparse { indices, values } => {
                if indices.len() != values.len() {
                    return Err(CovapError::invalid(
                        "sparse payload index/value length mismatch",
                    ));
                }
                let len = out.len();
                for (&i, &v) in indices.iter().zip(values) {
                    let slot = out.get_mut(i).ok_or_else(|| {
                        CovapError::invalid(format!("sparse index {i} out of range {len}"))
                    })?;
                    *slot = v;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayloadEntry {
    pub tensor: usize,
    pub payload: TensorPayload,
}

/// What one worker sends in one step. Tensors without an entry send nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate {
    pub step: u64,
    pub entries: Vec<PayloadEntry>,
}

impl CompressedUpdate {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.tensor).collect()
    }

    pub fn payload_elements(&self) -> usize {
        self.entries.iter().map(|e| e.payload.element_count()).sum()
    }

    pub fn wire_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.payload.wire_bytes()).sum()
    }
}

/// Re-embed an update into full-width tensors with the given element counts.
pub fn decompress(update: &CompressedUpdate, shapes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
    for entry in &update.entries {
        let slot = out.get_mut(entry.tensor).ok_or_else(|| {
            CovapError::invalid(format!(
                "tensor index {} out of range ({} tensors)",
                entry.tensor,
                shapes.len()
            ))
        })?;
        entry.payload.write_into(slot)?;
    }
    Ok(out)
}

pub trait Compressor: Send {
    fn name(&self) -> &'static str;

    /// Compress one step's (already feedback-corrected) gradients.
    fn compress(&mut self, step: u64, grads: &[Vec<f64>]) -> Result<CompressedUpdate>;
}

/// Identity compressor: every tensor sent dense.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dense;

impl Compressor for Dense {
    fn name(&self) -> &'static str {
        "none"
    }

    fn compress(&mut self, step: u64, grads: &[Vec<f64>]) -> Result<CompressedUpdate> {
        Ok(CompressedUpdate {
            step,
            entries: grads
                .iter()
                .enumerate()
                .map(|(tensor, g)| PayloadEntry {
                    tensor,
                    payload: TensorPayload::Dense(g.clone()),
                })
                .collect(),
        })
    }
}

/// Compensation-coefficient schedule for error feedback:
/// `min(init_value + floor(step / ascend_steps) * ascend_range, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfSchedule {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_init")]
    pub init_value: f64,
    #[serde(default = "default_ascend_steps")]
    pub ascend_steps: u64,
    #[serde(default = "default_ascend_range")]
    pub ascend_range: f64,
}

fn default_true() -> bool {
    true
}
fn default_init() -> f64 {
    0.3
}
fn default_ascend_steps() -> u64 {
    100
}
fn default_ascend_range() -> f64 {
    0.1
}

impl Default for EfSchedule {
    fn default() -> Self {
        EfSchedule {
            enabled: true,
            init_value: default_init(),
            ascend_steps: default_ascend_steps(),
            ascend_range: default_ascend_range(),
        }
    }
}

impl EfSchedule {
    /// Defaults sized to a run of `total_steps`: ascend every 5% of the run.
    pub fn for_total_steps(total_steps: u64) -> Self {
        EfSchedule {
            ascend_steps: (total_steps / 20).max(1),
            ..EfSchedule::default()
        }
    }

    /// Coefficient pinned at 1 from the first step.
    pub fn constant_one() -> Self {
        EfSchedule {
            enabled: true,
            init_value: 1.0,
            ascend_steps: 1,
            ascend_range: 0.0,
        }
    }

    pub fn disabled() -> Self {
        EfSchedule {
            enabled: false,
            ..EfSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.init_value) {
            return Err(CovapError::invalid(format!(
                "ef init_value {} outside [0, 1]",
                self.init_value
            )));
        }
        if self.ascend_steps == 0 {
            return Err(CovapError::invalid("ef ascend_steps must be positive"));
        }
        if !(self.ascend_range >= 0.0 && self.ascend_range.is_finite()) {
            return Err(CovapError::invalid(format!(
                "ef ascend_range {} must be a non-negative number",
                self.ascend_range
            )));
        }
        Ok(())
    }

    pub fn coefficient(&self, num_steps: u64) -> f64 {
        let raised = self.init_value + (num_steps / self.ascend_steps) as f64 * self.ascend_range;
        raised.min(1.0)
    }
}

/// Per-worker error-feedback memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorState {
    pub residuals: Vec<Vec<f64>>,
    pub num_steps: u64,
}

impl CompressorState {
    pub fn new(shapes: &[usize]) -> Self {
        CompressorState {
            residuals: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            num_steps: 0,
        }
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.residuals.iter().map(Vec::len).collect()
    }

    fn check_layout(&self, grads: &[Vec<f64>]) -> Result<()> {
        let matches = grads.len() == self.residuals.len()
            && grads
                .iter()
                .zip(&self.residuals)
                .all(|(g, r)| g.len() == r.len());
        if matches {
            Ok(())
        } else {
            Err(CovapError::InvalidState(format!(
                "gradient layout {:?} does not match residual layout {:?}",
                grads.iter().map(Vec::len).collect::<Vec<_>>(),
                self.shapes()
            )))
        }
    }
}

/// One error-feedback step: add scaled residuals, compress, keep the
/// remainder. Returns the update and the corrected gradient that was fed to
/// the compressor.
pub fn feedback_step<C: Compressor + ?Sized>(
    compressor: &mut C,
    schedule: &EfSchedule,
    state: &mut CompressorState,
    grads: &[Vec<f64>],
) -> Result<(CompressedUpdate, Vec<Vec<f64>>)> {
    state.check_layout(grads)?;
    let mut corrected: Vec<Vec<f64>> = grads.to_vec();
    if schedule.enabled {
        let coeff = schedule.coefficient(state.num_steps);
        for (g, r) in corrected.iter_mut().zip(&state.residuals) {
            for (gi, ri) in g.iter_mut().zip(r) {
                *gi += coeff * ri;
            }
        }
    }

    let update = compressor.compress(state.num_steps, &corrected)?;

    // residuals = G - G', computed tensor by tensor so untouched tensors keep
    // G exactly and dense payloads leave exact zeros.
    for (r, g) in state.residuals.iter_mut().zip(&corrected) {
        r.copy_from_slice(g);
    }
    for entry in &update.entries {
        let g = corrected.get(entry.tensor).ok_or_else(|| {
            CovapError::Invariant(format!(
                "compressor emitted unknown tensor {}",
                entry.tensor
            ))
        })?;
        let r = &mut state.residuals[entry.tensor];
        match &entry.payload {
            TensorPayload::Dense(v) | TensorPayload::Half(v) => {
                for ((ri, gi), vi) in r.iter_mut().zip(g).zip(v) {
                    *ri = gi - vi;
                }
            }
            TensorPayload::Sparse { indices, values } => {
                for (&i, &v) in indices.iter().zip(values) {
                    r[i] = g[i] - v;
                }
            }
        }
    }
    state.num_steps += 1;
    Ok((update, corrected))
}

/// A compressor paired with its own error-feedback memory.
pub struct ErrorFeedback<C> {
    pub compressor: C,
    pub schedule: EfSchedule,
    pub state: CompressorState,
}

impl<C: Compressor> ErrorFeedback<C> {
    pub fn new(compressor: C, schedule: EfSchedule, shapes: &[usize]) -> Self {
        ErrorFeedback {
            compressor,
            schedule,
            state: CompressorState::new(shapes),
        }
    }

    pub fn compress(&mut self, grads: &[Vec<f64>]) -> Result<CompressedUpdate> {
        feedback_step(&mut self.compressor, &self.schedule, &mut self.state, grads).map(|(u, _)| u)
    }

    pub fn compress_traced(
        &mut self,
        grads: &[Vec<f64>],
    ) -> Result<(CompressedUpdate, Vec<Vec<f64>>)> {
        feedback_step(&mut self.compressor, &self.schedule, &mut self.state, grads)
    }
}

//! Desk-scale synchronous data-parallel trainer.
//!
//! `P` in-process workers each hold a seeded data shard, a parameter copy and
//! their own error-feedback memory. Every step they compress locally, the
//! decompressed updates are averaged in worker order, and all copies apply
//! the same SGD step.

pub mod model;

use serde::{Deserialize, Serialize};

pub use model::{ToyKind, ToyModel};

use crate::baseline::BaselineConfig;
use crate::compress::{self, Compressor, CompressorState, Dense, EfSchedule};
use crate::covap::{is_selected, CovapConfig, CovapFilter};
use crate::error::{CovapError, Result};
use crate::par::{map_mut_ordered, Parallelism};
use crate::topology::{allocate_buckets, shard_plan, LayerSpec, ModelSpec};

/// Element-wise mean, summed in worker order so the bits do not depend on
/// which worker finished first.
pub fn allreduce_mean(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| CovapError::invalid("allreduce over zero workers"))?;
    let mut acc = vec![0.0; first.len()];
    for (w, v) in vectors.iter().enumerate() {
        if v.len() != acc.len() {
            return Err(CovapError::invalid(format!(
                "worker {w} sent {} elements, expected {}",
                v.len(),
                acc.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let p = vectors.len() as f64;
    for a in &mut acc {
        *a /= p;
    }
    Ok(acc)
}

/// Collects one contribution per worker in any arrival order.
#[derive(Debug, Clone)]
pub struct Reducer {
    slots: Vec<Option<Vec<f64>>>,
}

impl Reducer {
    pub fn new(workers: usize) -> Self {
        Reducer {
            slots: vec![None; workers],
        }
    }

    pub fn submit(&mut self, worker: usize, v: Vec<f64>) -> Result<()> {
        let slot = self
            .slots
            .get_mut(worker)
            .ok_or_else(|| CovapError::invalid(format!("no worker {worker}")))?;
        if slot.is_some() {
            return Err(CovapError::InvalidState(format!(
                "worker {worker} submitted twice"
            )));
        }
        *slot = Some(v);
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<f64>> {
        let vectors = self
            .slots
            .into_iter()
            .enumerate()
            .map(|(w, s)| {
                s.ok_or_else(|| CovapError::InvalidState(format!("worker {w} never submitted")))
            })
            .collect::<Result<Vec<_>>>()?;
        allreduce_mean(&vectors)
    }
}

fn default_cap() -> u64 {
    4096
}

fn default_noise() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ToyKind,
    pub dim: usize,
    #[serde(default)]
    pub hidden: usize,
    /// Synthetic layer sizes; empty means eight near-equal layers.
    #[serde(default)]
    pub layers: Vec<u64>,
    #[serde(default = "default_cap")]
    pub bucket_cap_bytes: u64,
    pub workers: usize,
    pub samples_per_worker: usize,
    pub steps: u64,
    pub lr: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Worker threads; 0 or 1 runs workers round-robin on one thread.
    #[serde(default)]
    pub threads: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(CovapError::config(format!("train.{field}"), msg));
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        if self.samples_per_worker == 0 {
            return bad("samples_per_worker", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise", "must be >= 0");
        }
        if self.bucket_cap_bytes == 0 {
            return bad("bucket_cap_bytes", "must be at least 1");
        }
        Ok(())
    }

    pub fn toy_model(&self) -> Result<ToyModel> {
        ToyModel::new(self.objective, self.dim, self.hidden)
            .map_err(|e| CovapError::config("train.dim", e.to_string()))
    }

    /// Layer list covering exactly the model's parameters.
    pub fn layer_spec(&self, param_count: usize) -> Result<ModelSpec> {
        let sizes = if self.layers.is_empty() {
            let parts = param_count.clamp(1, 8);
            (0..parts)
                .map(|i| (param_count / parts + usize::from(i < param_count % parts)) as u64)
                .collect()
        } else {
            self.layers.clone()
        };
        let total: u64 = sizes.iter().sum();
        if total != param_count as u64 || sizes.contains(&0) {
            return Err(CovapError::config(
                "train.layers",
                format!("sizes sum to {total}, model has {param_count} parameters"),
            ));
        }
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| LayerSpec::new(format!("layer{i}"), n))
            .collect();
        Ok(ModelSpec::new(layers).with_cap(self.bucket_cap_bytes))
    }
}

/// The per-worker compressor used by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainCompressor {
    None,
    Covap(CovapConfig),
    Baseline {
        config: BaselineConfig,
        ef: EfSchedule,
    },
}

impl TrainCompressor {
    fn interval(&self) -> u32 {
        match self {
            TrainCompressor::Covap(c) => c.interval,
            _ => 1,
        }
    }

    fn build(&self) -> Result<(Box<dyn Compressor>, EfSchedule)> {
        Ok(match self {
            TrainCompressor::None => (Box::new(Dense), EfSchedule::disabled()),
            TrainCompressor::Covap(c) => {
                c.validate()?;
                (Box::new(CovapFilter::from(c)), c.ef)
            }
            TrainCompressor::Baseline { config, ef } => {
                ef.validate()?;
                (config.build()?, *ef)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionSample {
    pub step: u64,
    /// `|x - C(x)|^2 / |x|^2` for the corrected gradient actually compressed.
    pub observed: f64,
    /// Same ratio averaged over every phase of the rotation (COVAP only).
    pub phase_averaged: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRun {
    /// Global loss at the start of each step.
    pub losses: Vec<f64>,
    /// Bytes each worker put on the wire per step.
    pub bytes: Vec<u64>,
    pub final_loss: f64,
    #[serde(skip)]
    pub final_params: Vec<f64>,
    pub diverged: bool,
    pub divergence_step: Option<u64>,
    pub interval: u32,
    pub tensor_numels: Vec<usize>,
    pub dense_bytes: u64,
    #[serde(skip)]
    pub contraction: Vec<ContractionSample>,
}

struct Worker {
    params: Vec<f64>,
    shard: model::Shard,
    compressor: Box<dyn Compressor>,
    ef: EfSchedule,
    state: CompressorState,
}

struct StepOut {
    loss: f64,
    update: Vec<f64>,
    bytes: u64,
    corrected: Vec<Vec<f64>>,
}

fn split(flat: &[f64], numels: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(numels.len());
    let mut at = 0;
    for &n in numels {
        out.push(flat[at..at + n].to_vec());
        at += n;
    }
    out
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Runs synchronous data-parallel SGD.
pub fn train(
    cfg: &TrainConfig,
    compressor: &TrainCompressor,
    seed: u64,
    mode: Parallelism,
) -> Result<TrainRun> {
    cfg.validate()?;
    let toy = cfg.toy_model()?;
    let d = toy.param_count();
    let spec = cfg.layer_spec(d)?;
    let interval = compressor.interval();
    let plan = shard_plan(&allocate_buckets(&spec, spec.bucket_cap_bytes)?, interval)?;
    let numels = plan.tensor_numels();

    let init = toy.init_params(seed);
    let mut workers = (0..cfg.workers)
        .map(|w| {
            let (c, ef) = compressor.build()?;
            Ok(Worker {
                params: init.clone(),
                shard: toy.make_shard(seed, w, cfg.samples_per_worker, cfg.noise),
                compressor: c,
                ef,
                state: CompressorState::new(&numels),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let audit_phases = match compressor {
        TrainCompressor::Covap(c) => Some((c.convention, c.interval)),
        _ => None,
    };
    let global_loss = |ws: &[Worker]| -> f64 {
        ws.iter()
            .map(|w| toy.loss_grad(&w.params, &w.shard).0)
            .sum::<f64>()
            / ws.len() as f64
    };

    let mut run = TrainRun {
        losses: Vec::with_capacity(cfg.steps as usize),
        bytes: Vec::with_capacity(cfg.steps as usize),
        final_loss: f64::NAN,
        final_params: Vec::new(),
        diverged: false,
        divergence_step: None,
        interval,
        tensor_numels: numels.clone(),
        dense_bytes: 4 * d as u64,
        contraction: Vec::new(),
    };

    for step in 0..cfg.steps {
        let outs = map_mut_ordered(mode, &mut workers, |w| -> Result<StepOut> {
            let (loss, grad) = toy.loss_grad(&w.params, &w.shard);
            let tensors = split(&grad, &numels);
            let (update, corrected) =
                compress::feedback_step(w.compressor.as_mut(), &w.ef, &mut w.state, &tensors)?;
            let bytes = update.wire_bytes();
            let dense = compress::decompress(&update, &numels)?;
            Ok(StepOut {
                loss,
                update: dense.concat(),
                bytes,
                corrected,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let loss = outs.iter().map(|o| o.loss).sum::<f64>() / outs.len() as f64;
        if !loss.is_finite() {
            log::warn!("loss became {loss} at step {step}; halting");
            run.diverged = true;
            run.divergence_step = Some(step);
            break;
        }
        run.losses.push(loss);
        run.bytes.push(outs[0].bytes);

        let x = outs[0].corrected.concat();
        let total = sq_norm(&x);
        if total > 0.0 {
            let observed = x
                .iter()
                .zip(&outs[0].update)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / total;
            let phase_averaged = audit_phases.map(|(conv, i)| {
                let energy: Vec<f64> = outs[0].corrected.iter().map(|t| sq_norm(t)).collect();
                let mut dropped = 0.0;
                for phase in 0..u64::from(i) {
                    dropped += energy
                        .iter()
                        .enumerate()
                        .filter(|&(t, _)| !is_selected(conv, phase, i, t))
                        .map(|(_, e)| e)
                        .sum::<f64>();
                }
                dropped / (f64::from(i) * total)
            });
            run.contraction.push(ContractionSample {
                step,
                observed,
                phase_averaged,
            });
        }

        let mut reducer = Reducer::new(outs.len());
        for (w, o) in outs.into_iter().enumerate().rev() {
            reducer.submit(w, o.update)?;
        }
        let mean = reducer.finish()?;
        for w in &mut workers {
            for (p, g) in w.params.iter_mut().zip(&mean) {
                *p -= cfg.lr * g;
            }
        }
        let reference = &workers[0].params;
        if let Some(bad) = workers[1..].iter().position(|w| {
            w.params
                .iter()
                .zip(reference)
                .any(|(a, b)| a.to_bits() != b.to_bits())
        }) {
            return Err(CovapError::Invariant(format!(
                "worker {} parameters diverged from worker 0 after step {step}",
                bad + 1
            )));
        }
    }

    run.final_loss = global_loss(&workers);
    if !run.final_loss.is_finite() && !run.diverged {
        run.diverged = true;
        run.divergence_step = Some(cfg.steps);
    }
    run.final_params = workers.swap_remove(0).params;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionAudit {
    pub max_observed: f64,
    /// Mean observed ratio over consecutive windows of `interval` steps.
    pub window_means: Vec<f64>,
    /// Largest gap between a phase-averaged ratio and `1 - 1/I`.
    pub max_phase_deviation: Option<f64>,
}

pub fn contraction_audit(run: &TrainRun) -> ContractionAudit {
    let i = run.interval.max(1) as usize;
    let observed: Vec<f64> = run.contraction.iter().map(|c| c.observed).collect();
    let target = 1.0 - 1.0 / run.interval.max(1) as f64;
    let deviations: Vec<f64> = run
        .contraction
        .iter()
        .filter_map(|c| c.phase_averaged.map(|p| (p - target).abs()))
        .collect();
    ContractionAudit {
        max_observed: observed.iter().copied().fold(0.0, f64::max),
        window_means: observed
            .chunks_exact(i)
            .map(|w| w.iter().sum::<f64>() / i as f64)
            .collect(),
        max_phase_deviation: (!deviations.is_empty())
            .then(|| deviations.iter().copied().fold(0.0, f64::max)),
    }
}

/// `step,loss,bytes` rows.
pub fn write_run_csv<W: std::io::Write>(out: W, run: &TrainRun) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "bytes"])?;
    for (step, (loss, bytes)) in run.losses.iter().zip(&run.bytes).enumerate() {
        w.write_record([step.to_string(), format!("{loss:.12e}"), bytes.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

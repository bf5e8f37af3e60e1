//! Experiment configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, BaselineScheme};
use crate::compress::EfSchedule;
use crate::covap::{CovapConfig, SelectionConvention};
use crate::error::{CovapError, Result};
use crate::perf::{ccr, choose_interval, CompressStream};
use crate::sim::{calibrated_cluster, comm_time, ClusterConfig, SimScheme};
use crate::topology::{allocate_buckets, ModelSpec};
use crate::trainer::{TrainCompressor, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterConfig>,
    #[serde(default)]
    pub compressor: CompressorConfig,
    #[serde(default)]
    pub covap: CovapSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpeedups>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

/// Inline model, or a path to a model JSON relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(String),
    Inline(ModelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub t_before_ms: f64,
    /// Ignored when every layer declares `backward_ms`.
    #[serde(default)]
    pub t_comp_ms: f64,
    /// Dense communication target; the link efficiency is fitted to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_comm_ms: Option<f64>,
    #[serde(default)]
    pub compress_stream: CompressStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    None,
    #[default]
    Covap,
    Topk,
    Randomk,
    Fp16,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorConfig {
    pub scheme: SchemeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntervalSpec {
    Fixed(u32),
    /// `max(1, ceil(CCR))` from the resolved timing.
    Auto(Auto),
}

impl Default for IntervalSpec {
    fn default() -> Self {
        IntervalSpec::Auto(Auto::Auto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovapSection {
    #[serde(default)]
    pub interval: IntervalSpec,
    #[serde(default)]
    pub ef: EfSchedule,
    #[serde(default)]
    pub convention: SelectionConvention,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// COVAP intervals to evaluate.
    #[serde(default)]
    pub ratios: Vec<u32>,
    /// Cluster sizes; defaults to `cluster.workers`.
    #[serde(default)]
    pub workers: Vec<u32>,
    #[serde(default)]
    pub schemes: Vec<CompressorConfig>,
}

fn default_tolerance() -> f64 {
    0.03
}

/// Externally printed speedups to cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpeedups {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_ovlp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_ls: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

/// Simulation inputs after defaults, file references and calibration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub model: ModelSpec,
    pub t_before: f64,
    pub t_comp: f64,
    pub cluster: ClusterConfig,
    pub stream: CompressStream,
    /// Dense allreduce time of all buckets on the (calibrated) cluster.
    pub t_comm: f64,
    pub ccr: f64,
    pub interval: u32,
}

/// The offending source line, trimmed, for error messages.
fn source_line(text: &str, line: usize) -> &str {
    text.lines()
        .nth(line.saturating_sub(1))
        .unwrap_or("")
        .trim()
}

impl ExperimentConfig {
    /// Parses JSON, naming the offending field and line on failure.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let near = source_line(text, inner.line());
            let message = if near.is_empty() {
                inner.to_string()
            } else {
                format!("{inner}, near `{near}`")
            };
            CovapError::config(
                if path.is_empty() || path == "." {
                    "<root>".into()
                } else {
                    path
                },
                message,
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and inlines a model given by path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CovapError::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        if let Some(ModelSource::Path(rel)) = &cfg.model {
            let base = path.parent().unwrap_or(Path::new("."));
            let model_path = base.join(rel);
            let body = std::fs::read_to_string(&model_path).map_err(|e| {
                CovapError::config(
                    "model",
                    format!("cannot read {}: {e}", model_path.display()),
                )
            })?;
            let de = &mut serde_json::Deserializer::from_str(&body);
            let spec: ModelSpec = serde_path_to_error::deserialize(de).map_err(|e| {
                CovapError::config(
                    format!("model({rel}).{}", e.path()),
                    e.into_inner().to_string(),
                )
            })?;
            cfg.model = Some(ModelSource::Inline(spec));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let CompressorConfig {
            scheme: SchemeName::Topk | SchemeName::Randomk,
            k_fraction,
        } = self.compressor
        {
            match k_fraction {
                Some(k) if k > 0.0 && k <= 1.0 => {}
                _ => {
                    return Err(CovapError::config(
                        "compressor.k_fraction",
                        "sparsifiers need 0 < k_fraction <= 1",
                    ))
                }
            }
        }
        if let IntervalSpec::Fixed(0) = self.covap.interval {
            return Err(CovapError::config(
                "covap.interval",
                "must be at least 1 or \"auto\"",
            ));
        }
        self.covap
            .ef
            .validate()
            .map_err(|e| CovapError::config("covap.ef", e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.ratios.is_empty() && s.workers.is_empty() && s.schemes.is_empty() {
                return Err(CovapError::config("sweep", "present but empty"));
            }
            if s.ratios.contains(&0) {
                return Err(CovapError::config("sweep.ratios", "ratios must be >= 1"));
            }
            if s.workers.contains(&0) {
                return Err(CovapError::config(
                    "sweep.workers",
                    "worker counts must be >= 1",
                ));
            }
        }
        if let Some(c) = &self.cluster {
            c.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<&ModelSpec> {
        match &self.model {
            Some(ModelSource::Inline(m)) => Ok(m),
            Some(ModelSource::Path(p)) => Err(CovapError::config(
                "model",
                format!("path `{p}` was not loaded; use ExperimentConfig::load"),
            )),
            None => Err(CovapError::config("model", "required by this command")),
        }
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.model_spec()?.clone();
        model
            .validate()
            .map_err(|e| CovapError::config("model", e.to_string()))?;
        let timing = self
            .timing
            .as_ref()
            .ok_or_else(|| CovapError::config("timing", "required by this command"))?;
        let cluster = self
            .cluster
            .as_ref()
            .ok_or_else(|| CovapError::config("cluster", "required by this command"))?;
        let t_comp = match model.backward_times() {
            Some(ms) => ms.iter().sum(),
            None => timing.t_comp_ms,
        };
        if !(t_comp > 0.0 && t_comp.is_finite()) {
            return Err(CovapError::config(
                "timing.t_comp_ms",
                "backward time must be positive",
            ));
        }
        if !(timing.t_before_ms >= 0.0 && timing.t_before_ms.is_finite()) {
            return Err(CovapError::config("timing.t_before_ms", "must be >= 0"));
        }
        let cluster = match timing.t_comm_ms {
            Some(target) if cluster.workers > 1 => calibrated_cluster(&model, cluster, target)?,
            _ => cluster.clone(),
        };
        let plan = allocate_buckets(&model, model.bucket_cap_bytes)?;
        let t_comm = if cluster.workers > 1 {
            plan.buckets
                .iter()
                .map(|b| comm_time(b.bytes, &cluster))
                .sum()
        } else {
            0.0
        };
        let ccr = ccr(t_comm, t_comp)?;
        let interval = match self.covap.interval {
            IntervalSpec::Fixed(i) => i,
            IntervalSpec::Auto(_) => choose_interval(ccr),
        };
        Ok(Resolved {
            model,
            t_before: timing.t_before_ms,
            t_comp,
            cluster,
            stream: timing.compress_stream,
            t_comm,
            ccr,
            interval,
        })
    }

    /// Simulator scheme for `c`; COVAP uses `interval`.
    pub fn sim_scheme(&self, c: &CompressorConfig, interval: u32) -> Result<SimScheme> {
        let k = || {
            c.k_fraction
                .filter(|k| *k > 0.0 && *k <= 1.0)
                .ok_or_else(|| {
                    CovapError::config(
                        "compressor.k_fraction",
                        "sparsifiers need 0 < k_fraction <= 1",
                    )
                })
        };
        Ok(match c.scheme {
            SchemeName::None => SimScheme::Dense,
            SchemeName::Covap => SimScheme::Covap {
                interval,
                convention: self.covap.convention,
            },
            SchemeName::Topk => SimScheme::Topk { k_fraction: k()? },
            SchemeName::Randomk => SimScheme::Randomk { k_fraction: k()? },
            SchemeName::Fp16 => SimScheme::Fp16,
        })
    }

    /// COVAP interval for training: fixed, or from the timing when `auto`.
    pub fn train_interval(&self) -> Result<u32> {
        match self.covap.interval {
            IntervalSpec::Fixed(i) => Ok(i),
            IntervalSpec::Auto(_) => Ok(self
                .resolve()
                .map_err(|_| {
                    CovapError::config(
                        "covap.interval",
                        "\"auto\" needs model, timing and cluster; give a number",
                    )
                })?
                .interval),
        }
    }

    pub fn train_compressor(&self) -> Result<TrainCompressor> {
        let c = self.compressor;
        Ok(match c.scheme {
            SchemeName::None => TrainCompressor::None,
            SchemeName::Covap => TrainCompressor::Covap(CovapConfig {
                interval: self.train_interval()?,
                ef: self.covap.ef,
                convention: self.covap.convention,
            }),
            SchemeName::Topk | SchemeName::Randomk | SchemeName::Fp16 => {
                let scheme = match c.scheme {
                    SchemeName::Topk => BaselineScheme::Topk,
                    SchemeName::Randomk => BaselineScheme::Randomk,
                    _ => BaselineScheme::Fp16,
                };
                TrainCompressor::Baseline {
                    config: BaselineConfig {
                        scheme,
                        k_fraction: c.k_fraction,
                        rng_seed: self.seed,
                        ef_enabled: self.covap.ef.enabled,
                    },
                    ef: self.covap.ef,
                }
            }
        })
    }

    /// Compact JSON of the config with the model inlined; stable across runs.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

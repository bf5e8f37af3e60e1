//! Reference compressors (Top-k, Random-k, FP16) and their measured overhead
//! table. Sparsifiers apply `k` per effective tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compress::{CompressedUpdate, Compressor, PayloadEntry, TensorPayload};
use crate::error::{CovapError, Result};

/// Largest finite half-precision value.
pub const HALF_MAX: f64 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineScheme {
    Topk,
    Randomk,
    Fp16,
}

impl BaselineScheme {
    pub fn is_sparsifier(self) -> bool {
        matches!(self, BaselineScheme::Topk | BaselineScheme::Randomk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub scheme: BaselineScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_fraction: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub ef_enabled: bool,
}

fn default_true() -> bool {
    true
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.scheme.is_sparsifier(), self.k_fraction) {
            (true, Some(k)) => check_fraction(k),
            (true, None) => Err(CovapError::invalid(format!(
                "{:?} needs k_fraction",
                self.scheme
            ))),
            (false, Some(_)) => Err(CovapError::invalid("fp16 takes no k_fraction")),
            (false, None) => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Compressor>> {
        self.validate()?;
        Ok(match self.scheme {
            BaselineScheme::Topk => Box::new(TopK {
                k_fraction: self.k_fraction.unwrap_or(1.0),
            }),
            BaselineScheme::Randomk => Box::new(RandomK {
                k_fraction: self.k_fraction.unwrap_or(1.0),
                seed: self.rng_seed,
            }),
            BaselineScheme::Fp16 => Box::new(Fp16::default()),
        })
    }
}

fn check_fraction(k_fraction: f64) -> Result<()> {
    if k_fraction > 0.0 && k_fraction <= 1.0 {
        Ok(())
    } else {
        Err(CovapError::invalid(format!(
            "k_fraction {k_fraction} outside (0, 1]"
        )))
    }
}

/// `ceil(k_fraction * d)`, tolerant of products like `0.3 * 10` landing a
/// hair above an integer, and never below 1.
pub fn k_count(d: usize, k_fraction: f64) -> usize {
    let raw = k_fraction * d as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, d)
}

/// Entries of largest magnitude, in decreasing magnitude; ties go to the
/// lower index.
pub fn topk_compress(x: &[f64], k_fraction: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    if x.is_empty() {
        return Err(CovapError::invalid("top-k of an empty vector"));
    }
    check_fraction(k_fraction)?;
    let k = k_count(x.len(), k_fraction);
    let order = |&a: &usize, &b: &usize| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b));
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    let values = idx.iter().map(|&i| x[i]).collect();
    Ok((idx, values))
}

/// Uniform sample of `ceil(k * d)` distinct indices (ascending).
pub fn randomk_compress<R: Rng + ?Sized>(
    x: &[f64],
    k_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if x.is_empty() {
        return Err(CovapError::invalid("random-k of an empty vector"));
    }
    check_fraction(k_fraction)?;
    let k = k_count(x.len(), k_fraction);
    let mut idx = rand::seq::index::sample(rng, x.len(), k).into_vec();
    idx.sort_unstable();
    let values = idx.iter().map(|&i| x[i]).collect();
    Ok((idx, values))
}

/// Round each element to half precision (nearest-even) and widen back.
/// Returns the values and how many inputs were clamped to ±65504.
pub fn fp16_roundtrip(x: &[f64]) -> (Vec<f64>, usize) {
    let mut saturated = 0;
    let out = x
        .iter()
        .map(|&v| {
            let clamped = if v.abs() > HALF_MAX {
                saturated += 1;
                HALF_MAX.copysign(v)
            } else {
                v
            };
            half::f16::from_f64(clamped).to_f64()
        })
        .collect();
    (out, saturated)
}

/// Stream seed shared by every worker for one `(step, tensor)` pair.
pub fn shared_seed(seed: u64, step: u64, tensor: usize) -> u64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (tensor as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
pub struct TopK {
    pub k_fraction: f64,
}

impl Compressor for TopK {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn compress(&mut self, step: u64, grads: &[Vec<f64>]) -> Result<CompressedUpdate> {
        let entries = grads
            .iter()
            .enumerate()
            .map(|(tensor, g)| {
                let (indices, values) = topk_compress(g, self.k_fraction)?;
                Ok(PayloadEntry {
                    tensor,
                    payload: TensorPayload::Sparse { indices, values },
                })
            })
            .collect::<Result<_>>()?;
        Ok(CompressedUpdate { step, entries })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomK {
    pub k_fraction: f64,
    pub seed: u64,
}

impl Compressor for RandomK {
    fn name(&self) -> &'static str {
        "randomk"
    }

    fn compress(&mut self, step: u64, grads: &[Vec<f64>]) -> Result<CompressedUpdate> {
        let entries = grads
            .iter()
            .enumerate()
            .map(|(tensor, g)| {
                let mut rng = ChaCha8Rng::seed_from_u64(shared_seed(self.seed, step, tensor));
                let (indices, values) = randomk_compress(g, self.k_fraction, &mut rng)?;
                Ok(PayloadEntry {
                    tensor,
                    payload: TensorPayload::Sparse { indices, values },
                })
            })
            .collect::<Result<_>>()?;
        Ok(CompressedUpdate { step, entries })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Fp16 {
    pub saturated: u64,
}

impl Compressor for Fp16 {
    fn name(&self) -> &'static str {
        "fp16"
    }

    fn compress(&mut self, step: u64, grads: &[Vec<f64>]) -> Result<CompressedUpdate> {
        let entries = grads
            .iter()
            .enumerate()
            .map(|(tensor, g)| {
                let (values, saturated) = fp16_roundtrip(g);
                self.saturated += saturated as u64;
                PayloadEntry {
                    tensor,
                    payload: TensorPayload::Half(values),
                }
            })
            .collect();
        Ok(CompressedUpdate { step, entries })
    }
}

/// One row of the measured compression-overhead table (VGG-19, 64 GPUs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEntry {
    pub scheme: &'static str,
    pub hyperparameter: &'static str,
    pub compress_ms: f64,
    pub comm_reduction_ms: f64,
}

/// Parameter count of the model the reference table was measured on.
pub const COST_TABLE_PARAMS: u64 = 143_652_544;

pub const COST_TABLE: [CostEntry; 7] = [
    CostEntry {
        scheme: "topk",
        hyperparameter: "k=1%",
        compress_ms: 1560.0,
        comm_reduction_ms: 603.0,
    },
    CostEntry {
        scheme: "dgc",
        hyperparameter: "k=0.1%",
        compress_ms: 25.0,
        comm_reduction_ms: 747.0,
    },
    CostEntry {
        scheme: "randomk",
        hyperparameter: "k=1%",
        compress_ms: 200.0,
        comm_reduction_ms: 653.0,
    },
    CostEntry {
        scheme: "fp16",
        hyperparameter: "-",
        compress_ms: 5.0,
        comm_reduction_ms: 423.0,
    },
    CostEntry {
        scheme: "efsignsgd",
        hyperparameter: "-",
        compress_ms: 20.0,
        comm_reduction_ms: -210.0,
    },
    CostEntry {
        scheme: "powersgd",
        hyperparameter: "rank=1",
        compress_ms: 20.0,
        comm_reduction_ms: 753.0,
    },
    CostEntry {
        scheme: "oktopk",
        hyperparameter: "k=1%",
        compress_ms: 500.0,
        comm_reduction_ms: 674.0,
    },
];

pub fn cost_entry(scheme: &str) -> Option<&'static CostEntry> {
    COST_TABLE.iter().find(|e| e.scheme == scheme)
}

/// Compression overhead for `scheme` on a model of `params` parameters,
/// scaled linearly from the reference table. Unknown schemes cost nothing.
pub fn compress_overhead_ms(scheme: &str, params: u64) -> f64 {
    cost_entry(scheme).map_or(0.0, |e| {
        e.compress_ms * params as f64 / COST_TABLE_PARAMS as f64
    })
}

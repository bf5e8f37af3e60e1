//! Model description, bucket allocation and tensor sharding.
//!
//! Layers are listed in backward-pass completion order. They are packed
//! greedily into fixed-capacity communication buckets (a layer is never split
//! at this stage), and buckets that hold several times the median element
//! count are later sliced into evenly sized shards.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CovapError, Result};

/// Default communication bucket capacity: 25 MiB.
pub const DEFAULT_BUCKET_CAP_BYTES: u64 = 25 * 1024 * 1024;

fn default_bytes_per_param() -> u8 {
    4
}

fn default_cap() -> u64 {
    DEFAULT_BUCKET_CAP_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub param_count: u64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u8,
    /// Backward compute time of this layer, if measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_ms: Option<f64>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, param_count: u64) -> Self {
        LayerSpec {
            name: name.into(),
            param_count,
            bytes_per_param: 4,
            backward_ms: None,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.param_count * u64::from(self.bytes_per_param)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_cap")]
    pub bucket_cap_bytes: u64,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        ModelSpec {
            layers,
            bucket_cap_bytes: DEFAULT_BUCKET_CAP_BYTES,
        }
    }

    /// Layers with the given parameter counts at 4 bytes each, named `layer{i}`.
    pub fn from_counts(counts: &[u64]) -> Self {
        ModelSpec::new(
            counts
                .iter()
                .enumerate()
                .map(|(i, &n)| LayerSpec::new(format!("layer{i}"), n))
                .collect(),
        )
    }

    pub fn with_cap(mut self, cap_bytes: u64) -> Self {
        self.bucket_cap_bytes = cap_bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CovapError::invalid("model has no layers"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.param_count == 0 {
                return Err(CovapError::invalid(format!(
                    "layer {i} ({}) has zero parameters",
                    layer.name
                )));
            }
            if layer.bytes_per_param != 2 && layer.bytes_per_param != 4 {
                return Err(CovapError::invalid(format!(
                    "layer {i} ({}) has bytes_per_param {}, expected 2 or 4",
                    layer.name, layer.bytes_per_param
                )));
            }
            if let Some(ms) = layer.backward_ms {
                if !(ms.is_finite() && ms >= 0.0) {
                    return Err(CovapError::invalid(format!(
                        "layer {i} ({}) has invalid backward_ms {ms}",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.layers.iter().map(LayerSpec::bytes).sum()
    }

    /// Per-layer backward times, only when every layer declares one.
    pub fn backward_times(&self) -> Option<Vec<f64>> {
        self.layers.iter().map(|l| l.backward_ms).collect()
    }
}

/// A run of `numel` elements stored at `width` bytes each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Extent {
    numel: u64,
    width: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub index: usize,
    pub layer_refs: Vec<usize>,
    pub numel: u64,
    pub bytes: u64,
    #[serde(skip)]
    extents: Vec<Extent>,
}

impl Bucket {
    /// Bytes occupied by elements `[start, end)` of this bucket.
    fn slice_bytes(&self, start: u64, end: u64) -> u64 {
        let mut bytes = 0;
        let mut cursor = 0;
        for e in &self.extents {
            let lo = cursor.max(start);
            let hi = (cursor + e.numel).min(end);
            if hi > lo {
                bytes += (hi - lo) * u64::from(e.width);
            }
            cursor += e.numel;
        }
        bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shard {
    pub parent_bucket: usize,
    /// Element range `[start, end)` within the parent bucket.
    pub slice_range: (u64, u64),
    pub numel: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketPlan {
    pub cap_bytes: u64,
    pub buckets: Vec<Bucket>,
    /// Shards replacing oversized buckets, ordered by parent then offset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shards: Option<Vec<Shard>>,
}

/// The unit COVAP's filter selects from: an unsharded bucket or one shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EffectiveTensor {
    pub index: usize,
    pub parent_bucket: usize,
    /// Offset of the first element in the flattened gradient (bucket order).
    pub offset: u64,
    pub numel: u64,
    pub bytes: u64,
    pub sharded: bool,
}

/// Greedy in-order packing of layers into buckets of at most `cap_bytes`.
///
/// A layer joins the current bucket unless that would overflow the cap and the
/// bucket already holds something. A layer larger than the cap therefore gets
/// a bucket of its own and is never split.
pub fn allocate_buckets(model: &ModelSpec, cap_bytes: u64) -> Result<BucketPlan> {
    model.validate()?;
    if cap_bytes == 0 {
        return Err(CovapError::invalid(
            "bucket capacity must be at least 1 byte",
        ));
    }

    let mut buckets: Vec<Bucket> = Vec::new();
    let mut current: Option<Bucket> = None;
    for (i, layer) in model.layers.iter().enumerate() {
        let layer_bytes = layer.bytes();
        if let Some(b) = current.as_ref() {
            if b.bytes + layer_bytes > cap_bytes {
                buckets.extend(current.take());
            }
        }
        let b = current.get_or_insert_with(|| Bucket {
            index: buckets.len(),
            layer_refs: Vec::new(),
            numel: 0,
            bytes: 0,
            extents: Vec::new(),
        });
        b.layer_refs.push(i);
        b.numel += layer.param_count;
        b.bytes += layer_bytes;
        b.extents.push(Extent {
            numel: layer.param_count,
            width: layer.bytes_per_param,
        });
    }
    buckets.extend(current);

    Ok(BucketPlan {
        cap_bytes,
        buckets,
        shards: None,
    })
}

/// Exact median of bucket element counts, stored doubled so that the
/// mean-of-middles case of an even count stays an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Median {
    twice: u128,
}

impl Median {
    pub fn of(values: &[u64]) -> Option<Median> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let twice = if n % 2 == 1 {
            2 * u128::from(sorted[n / 2])
        } else {
            u128::from(sorted[n / 2 - 1]) + u128::from(sorted[n / 2])
        };
        Some(Median { twice })
    }

    pub fn as_f64(self) -> f64 {
        self.twice as f64 / 2.0
    }

    /// `Some(m)` when the median is a whole number.
    pub fn as_integer(self) -> Option<u64> {
        self.twice.is_multiple_of(2).then_some((self.twice / 2) as u64)
    }

    /// `floor(numel / median)` computed without rounding the median.
    pub fn parts(self, numel: u64) -> u64 {
        if self.twice == 0 {
            return 0;
        }
        ((2 * u128::from(numel)) / self.twice) as u64
    }
}

impl fmt::Display for Median {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_integer() {
            Some(m) => write!(f, "{m}"),
            None => write!(f, "{}.5", self.twice / 2),
        }
    }
}

impl Serialize for Median {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.as_integer() {
            Some(m) => s.serialize_u64(m),
            None => s.serialize_f64(self.as_f64()),
        }
    }
}

pub fn median_numel(plan: &BucketPlan) -> Result<Median> {
    let numels: Vec<u64> = plan.buckets.iter().map(|b| b.numel).collect();
    Median::of(&numels).ok_or_else(|| CovapError::invalid("plan has no buckets"))
}

/// Slice every bucket holding at least twice the median element count into
/// `min(floor(numel / median), interval)` even shards.
///
/// Existing shards on `plan` are discarded and recomputed from the buckets.
pub fn shard_plan(plan: &BucketPlan, interval: u32) -> Result<BucketPlan> {
    if interval == 0 {
        return Err(CovapError::invalid("interval must be at least 1"));
    }
    let median = median_numel(plan)?;
    let mut shards = Vec::new();
    for bucket in &plan.buckets {
        let parts = median.parts(bucket.numel);
        if parts < 2 {
            continue;
        }
        let count = parts.min(u64::from(interval));
        if count < 2 {
            continue;
        }
        let base = bucket.numel / count;
        let extra = bucket.numel % count;
        let mut start = 0;
        for k in 0..count {
            let len = base + u64::from(k < extra);
            shards.push(Shard {
                parent_bucket: bucket.index,
                slice_range: (start, start + len),
                numel: len,
            });
            start += len;
        }
    }
    Ok(BucketPlan {
        cap_bytes: plan.cap_bytes,
        buckets: plan.buckets.clone(),
        shards: Some(shards),
    })
}

impl BucketPlan {
    pub fn total_numel(&self) -> u64 {
        self.buckets.iter().map(|b| b.numel).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.buckets.iter().map(|b| b.bytes).sum()
    }

    /// Buckets in order, with sharded buckets replaced by their shards.
    pub fn effective_tensors(&self) -> Vec<EffectiveTensor> {
        let no_shards = Vec::new();
        let shards = self.shards.as_ref().unwrap_or(&no_shards);
        let mut out = Vec::new();
        let mut offset = 0;
        for bucket in &self.buckets {
            let mut children = shards
                .iter()
                .filter(|s| s.parent_bucket == bucket.index)
                .peekable();
            if children.peek().is_none() {
                out.push(EffectiveTensor {
                    index: out.len(),
                    parent_bucket: bucket.index,
                    offset,
                    numel: bucket.numel,
                    bytes: bucket.bytes,
                    sharded: false,
                });
            } else {
                for s in children {
                    let (start, end) = s.slice_range;
                    out.push(EffectiveTensor {
                        index: out.len(),
                        parent_bucket: bucket.index,
                        offset: offset + start,
                        numel: s.numel,
                        bytes: bucket.slice_bytes(start, end),
                        sharded: true,
                    });
                }
            }
            offset += bucket.numel;
        }
        out
    }

    pub fn effective_count(&self) -> usize {
        let sharded_parents = self.shards.as_ref().map_or(0, |shards| {
            let mut parents: Vec<usize> = shards.iter().map(|s| s.parent_bucket).collect();
            parents.dedup();
            parents.len()
        });
        let shard_count = self.shards.as_ref().map_or(0, Vec::len);
        self.buckets.len() - sharded_parents + shard_count
    }

    /// Element counts of the effective tensors, in order.
    pub fn tensor_numels(&self) -> Vec<usize> {
        self.effective_tensors()
            .iter()
            .map(|t| t.numel as usize)
            .collect()
    }
}

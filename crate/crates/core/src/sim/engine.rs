use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{allgather_time, comm_time, ClusterConfig};
use crate::baseline::{self, BaselineScheme};
use crate::covap::{is_selected, SelectionConvention};
use crate::error::{CovapError, Result};
use crate::perf::{CompressStream, PhaseTimes};
use crate::topology::{allocate_buckets, shard_plan, EffectiveTensor, ModelSpec};

/// What a simulated iteration sends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum SimScheme {
    #[serde(alias = "none")]
    Dense,
    Covap {
        interval: u32,
        #[serde(default)]
        convention: SelectionConvention,
    },
    Topk {
        k_fraction: f64,
    },
    Randomk {
        k_fraction: f64,
    },
    Fp16,
}

impl SimScheme {
    pub fn label(&self) -> String {
        match self {
            SimScheme::Dense => "none".into(),
            SimScheme::Covap { interval, .. } => format!("covap(I={interval})"),
            SimScheme::Topk { k_fraction } => format!("topk(k={k_fraction})"),
            SimScheme::Randomk { k_fraction } => format!("randomk(k={k_fraction})"),
            SimScheme::Fp16 => "fp16".into(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimScheme::Dense => "none",
            SimScheme::Covap { .. } => "covap",
            SimScheme::Topk { .. } => "topk",
            SimScheme::Randomk { .. } => "randomk",
            SimScheme::Fp16 => "fp16",
        }
    }

    /// Iterations after which the send pattern repeats.
    pub fn cycle_len(&self) -> u64 {
        match self {
            SimScheme::Covap { interval, .. } => u64::from((*interval).max(1)),
            _ => 1,
        }
    }

    pub fn baseline(&self) -> Option<BaselineScheme> {
        match self {
            SimScheme::Topk { .. } => Some(BaselineScheme::Topk),
            SimScheme::Randomk { .. } => Some(BaselineScheme::Randomk),
            SimScheme::Fp16 => Some(BaselineScheme::Fp16),
            _ => None,
        }
    }
}

/// Per-tensor durations for one iteration; `comm[i] = None` means tensor
/// `i` is not sent.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationCosts {
    pub comp: Vec<f64>,
    pub compress: Vec<f64>,
    pub comm: Vec<Option<f64>>,
}

impl IterationCosts {
    pub fn phase_times(&self, t_before: f64) -> PhaseTimes {
        PhaseTimes::per_tensor(
            t_before,
            self.comp.clone(),
            self.comm.iter().map(|m| m.unwrap_or(0.0)).collect(),
            self.compress.clone(),
        )
    }

    fn validate(&self) -> Result<()> {
        let b = self.comp.len();
        if self.compress.len() != b || self.comm.len() != b {
            return Err(CovapError::invalid(format!(
                "per-tensor lengths differ: comp {b}, compress {}, comm {}",
                self.compress.len(),
                self.comm.len()
            )));
        }
        let all = self
            .comp
            .iter()
            .chain(&self.compress)
            .chain(self.comm.iter().flatten());
        for &v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CovapError::invalid(format!(
                    "negative or non-finite duration {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A model mapped onto a cluster under one scheme.
#[derive(Debug, Clone)]
pub struct Workload {
    pub t_before: f64,
    pub tensors: Vec<EffectiveTensor>,
    pub comp_i: Vec<f64>,
    pub compress_i: Vec<f64>,
    pub cluster: ClusterConfig,
    pub scheme: SimScheme,
    pub stream: CompressStream,
}

impl Workload {
    /// Buckets (and, for COVAP, shards) the model and prices every tensor.
    /// Backward time is taken from the layers when all of them declare it,
    /// otherwise `t_comp` is split in proportion to element count.
    pub fn new(
        model: &ModelSpec,
        t_before: f64,
        t_comp: f64,
        cluster: &ClusterConfig,
        scheme: SimScheme,
        stream: CompressStream,
    ) -> Result<Self> {
        cluster.validate()?;
        if !(t_before.is_finite() && t_before >= 0.0 && t_comp.is_finite() && t_comp >= 0.0) {
            return Err(CovapError::invalid("phase times must be finite and >= 0"));
        }
        let mut plan = allocate_buckets(model, model.bucket_cap_bytes)?;
        if let SimScheme::Covap { interval, .. } = scheme {
            if interval == 0 {
                return Err(CovapError::invalid("covap interval must be at least 1"));
            }
            plan = shard_plan(&plan, interval)?;
        }
        if let SimScheme::Topk { k_fraction } | SimScheme::Randomk { k_fraction } = scheme {
            if !(k_fraction > 0.0 && k_fraction <= 1.0) {
                return Err(CovapError::invalid(format!(
                    "k_fraction {k_fraction} outside (0, 1]"
                )));
            }
        }

        let total = model.total_params() as f64;
        let bucket_ms: Vec<f64> = match model.backward_times() {
            Some(layer_ms) => plan
                .buckets
                .iter()
                .map(|b| b.layer_refs.iter().map(|&l| layer_ms[l]).sum())
                .collect(),
            None => plan
                .buckets
                .iter()
                .map(|b| t_comp * b.numel as f64 / total)
                .collect(),
        };
        let tensors = plan.effective_tensors();
        let comp_i = tensors
            .iter()
            .map(|t| {
                let parent = &plan.buckets[t.parent_bucket];
                bucket_ms[t.parent_bucket] * t.numel as f64 / parent.numel as f64
            })
            .collect();
        let overhead = scheme.baseline().map_or(0.0, |_| {
            baseline::compress_overhead_ms(scheme.name(), model.total_params())
        });
        let compress_i = tensors
            .iter()
            .map(|t| overhead * t.numel as f64 / total)
            .collect();

        Ok(Workload {
            t_before,
            tensors,
            comp_i,
            compress_i,
            cluster: cluster.clone(),
            scheme,
            stream,
        })
    }

    pub fn t_comp(&self) -> f64 {
        self.comp_i.iter().sum()
    }

    /// Single-worker time with no communication at all.
    pub fn t_linear(&self) -> f64 {
        self.t_before + self.t_comp()
    }

    pub fn costs(&self, iter: u64) -> IterationCosts {
        let comm = self
            .tensors
            .iter()
            .map(|t| match self.scheme {
                SimScheme::Dense => Some(comm_time(t.bytes, &self.cluster)),
                SimScheme::Covap {
                    interval,
                    convention,
                } => is_selected(convention, iter, interval, t.index)
                    .then(|| comm_time(t.bytes, &self.cluster)),
                SimScheme::Fp16 => Some(comm_time(t.numel * 2, &self.cluster)),
                SimScheme::Topk { k_fraction } | SimScheme::Randomk { k_fraction } => {
                    let k = baseline::k_count(t.numel as usize, k_fraction) as u64;
                    Some(allgather_time(k * 8, &self.cluster))
                }
            })
            .collect();
        IterationCosts {
            comp: self.comp_i.clone(),
            compress: self.compress_i.clone(),
            comm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ForwardStart,
    ForwardEnd,
    ComputeStart,
    ComputeEnd,
    CompressStart,
    CompressEnd,
    CommStart,
    CommEnd,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ForwardStart => "forward_start",
            EventKind::ForwardEnd => "forward_end",
            EventKind::ComputeStart => "compute_start",
            EventKind::ComputeEnd => "compute_end",
            EventKind::CompressStart => "compress_start",
            EventKind::CompressEnd => "compress_end",
            EventKind::CommStart => "comm_start",
            EventKind::CommEnd => "comm_end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub worker: usize,
    /// `None` for forward-pass events.
    pub tensor: Option<usize>,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTimeline {
    pub iter: u64,
    pub workers: usize,
    pub events: Vec<Event>,
    pub t_total: f64,
    /// Latest end of backward plus compression across workers.
    pub compute_end: f64,
    /// Channel idle gaps: `(after_tensor, ms)`.
    pub bubbles: Vec<(usize, f64)>,
    pub unoverlapped_comm: f64,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    ForwardStart,
    ForwardEnd,
    ComputeStart,
    ComputeEnd,
    CompressStart,
    CompressEnd,
    CommReady,
    CommEnd,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    time: f64,
    worker: usize,
    tensor: usize,
    action: Action,
}

impl Pending {
    fn key(&self) -> (usize, usize, u8) {
        (self.worker, self.tensor, self.action as u8)
    }
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed: BinaryHeap pops the earliest (time, worker, tensor, action).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.key().cmp(&self.key()))
    }
}

struct Collective {
    tensor: usize,
    duration: f64,
    entered: Vec<Option<f64>>,
    waiting: usize,
}

struct Loop<'a> {
    costs: &'a IterationCosts,
    stream: CompressStream,
    heap: BinaryHeap<Pending>,
    events: Vec<Event>,
    compress_free: Vec<f64>,
    compress_start: Vec<Vec<f64>>,
    collectives: Vec<Collective>,
    slot_of: Vec<Option<usize>>,
    next: usize,
    channel_free: f64,
    channel_busy: bool,
    last_comm: Option<(usize, f64)>,
    bubbles: Vec<(usize, f64)>,
}

impl Loop<'_> {
    fn push(&mut self, time: f64, worker: usize, tensor: usize, action: Action) {
        self.heap.push(Pending {
            time,
            worker,
            tensor,
            action,
        });
    }

    fn record(&mut self, time: f64, worker: usize, tensor: Option<usize>, kind: EventKind) {
        self.events.push(Event {
            time,
            worker,
            tensor,
            kind,
        });
    }

    fn step(&mut self, p: Pending) {
        let Pending {
            time: t,
            worker: w,
            tensor: i,
            action,
        } = p;
        let b = self.costs.comp.len();
        match action {
            Action::ForwardStart => {
                self.record(t, w, None, EventKind::ForwardStart);
            }
            Action::ForwardEnd => {
                self.record(t, w, None, EventKind::ForwardEnd);
                if b > 0 {
                    self.push(t, w, 0, Action::ComputeStart);
                }
            }
            Action::ComputeStart => {
                self.record(t, w, Some(i), EventKind::ComputeStart);
                let comp_end = t + self.costs.comp[i];
                let x = self.costs.compress[i];
                let ready = match self.stream {
                    CompressStream::Compute => comp_end + x,
                    CompressStream::Separate => {
                        let start = comp_end.max(self.compress_free[w]);
                        self.compress_start[w][i] = start;
                        self.compress_free[w] = start + x;
                        start + x
                    }
                };
                if let Some(m) = self.costs.comm[i] {
                    self.push(t.max(ready - m), w, i, Action::CommReady);
                }
                self.push(comp_end, w, i, Action::ComputeEnd);
            }
            Action::ComputeEnd => {
                self.record(t, w, Some(i), EventKind::ComputeEnd);
                let has_compress = self.costs.compress[i] > 0.0;
                match self.stream {
                    CompressStream::Compute => {
                        if has_compress {
                            self.push(t, w, i, Action::CompressStart);
                        } else if i + 1 < b {
                            self.push(t, w, i + 1, Action::ComputeStart);
                        }
                    }
                    CompressStream::Separate => {
                        if has_compress {
                            self.push(self.compress_start[w][i], w, i, Action::CompressStart);
                        }
                        if i + 1 < b {
                            self.push(t, w, i + 1, Action::ComputeStart);
                        }
                    }
                }
            }
            Action::CompressStart => {
                self.record(t, w, Some(i), EventKind::CompressStart);
                self.push(t + self.costs.compress[i], w, i, Action::CompressEnd);
            }
            Action::CompressEnd => {
                self.record(t, w, Some(i), EventKind::CompressEnd);
                if self.stream == CompressStream::Compute && i + 1 < b {
                    self.push(t, w, i + 1, Action::ComputeStart);
                }
            }
            Action::CommReady => {
                let slot = self.slot_of[i].expect("ready event for a tensor that is not sent");
                let c = &mut self.collectives[slot];
                c.entered[w] = Some(t);
                c.waiting -= 1;
                self.try_launch();
            }
            Action::CommEnd => {
                let workers = self.compress_free.len();
                for wk in 0..workers {
                    self.record(t, wk, Some(i), EventKind::CommEnd);
                }
                self.channel_free = t;
                self.channel_busy = false;
                self.last_comm = Some((i, t));
                self.next += 1;
                self.try_launch();
            }
        }
    }

    /// Starts the next collective once every worker has entered it and the
    /// channel is idle.
    fn try_launch(&mut self) {
        if self.channel_busy || self.next >= self.collectives.len() {
            return;
        }
        let c = &self.collectives[self.next];
        if c.waiting > 0 {
            return;
        }
        let enters: Vec<f64> = c.entered.iter().map(|e| e.expect("all entered")).collect();
        let (tensor, duration) = (c.tensor, c.duration);
        let start = enters.iter().fold(self.channel_free, |a, &e| a.max(e));
        if let Some((prev, prev_end)) = self.last_comm {
            if start > prev_end {
                self.bubbles.push((prev, start - prev_end));
            }
        }
        for (w, &e) in enters.iter().enumerate() {
            self.record(
                e.max(self.channel_free),
                w,
                Some(tensor),
                EventKind::CommStart,
            );
        }
        self.channel_busy = true;
        self.push(start + duration, 0, tensor, Action::CommEnd);
    }
}

/// Runs the event loop for one iteration on every worker of `cluster`.
///
/// Each worker starts at its skew offset, spends `t_before` in the forward
/// pass, then runs backward tensor by tensor. A tensor's collective is
/// entered once its backward has begun and early enough that it cannot end
/// before the tensor's compute (and compression) ends. Collectives share one
/// FIFO channel in tensor order and start when the last worker has entered.
pub fn simulate_costs(
    iter: u64,
    t_before: f64,
    costs: &IterationCosts,
    cluster: &ClusterConfig,
    stream: CompressStream,
) -> Result<IterationTimeline> {
    costs.validate()?;
    cluster.validate()?;
    if !(t_before.is_finite() && t_before >= 0.0) {
        return Err(CovapError::invalid("t_before must be finite and >= 0"));
    }
    let workers = cluster.workers as usize;
    let b = costs.comp.len();
    let mut slot_of = vec![None; b];
    let mut collectives = Vec::new();
    for (i, m) in costs.comm.iter().enumerate() {
        if let Some(m) = *m {
            slot_of[i] = Some(collectives.len());
            collectives.push(Collective {
                tensor: i,
                duration: m,
                entered: vec![None; workers],
                waiting: workers,
            });
        }
    }

    let mut lp = Loop {
        costs,
        stream,
        heap: BinaryHeap::new(),
        events: Vec::with_capacity(workers * (2 + 6 * b)),
        compress_free: vec![f64::NEG_INFINITY; workers],
        compress_start: vec![
            vec![0.0; b];
            if stream == CompressStream::Separate {
                workers
            } else {
                0
            }
        ],
        collectives,
        slot_of,
        next: 0,
        channel_free: f64::NEG_INFINITY,
        channel_busy: false,
        last_comm: None,
        bubbles: Vec::new(),
    };
    for w in 0..workers {
        let origin = cluster.skew(w);
        lp.push(origin, w, 0, Action::ForwardStart);
        lp.push(origin + t_before, w, 0, Action::ForwardEnd);
    }
    while let Some(p) = lp.heap.pop() {
        lp.step(p);
    }
    if lp.next != lp.collectives.len() {
        return Err(CovapError::Invariant(format!(
            "{} of {} collectives never ran",
            lp.collectives.len() - lp.next,
            lp.collectives.len()
        )));
    }

    let mut events = lp.events;
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.worker.cmp(&b.worker))
            .then(a.tensor.cmp(&b.tensor))
            .then(a.kind.cmp(&b.kind))
    });
    let t_total = events.iter().map(|e| e.time).fold(0.0, f64::max);
    let compute_end = events
        .iter()
        .filter(|e| {
            matches!(
                e.kind,
                EventKind::ForwardEnd | EventKind::ComputeEnd | EventKind::CompressEnd
            )
        })
        .map(|e| e.time)
        .fold(0.0, f64::max);
    Ok(IterationTimeline {
        iter,
        workers,
        events,
        t_total,
        compute_end,
        bubbles: lp.bubbles,
        unoverlapped_comm: (t_total - compute_end).max(0.0),
    })
}

/// Simulates iteration `iter` of a workload.
pub fn simulate_iteration(workload: &Workload, iter: u64) -> Result<IterationTimeline> {
    simulate_costs(
        iter,
        workload.t_before,
        &workload.costs(iter),
        &workload.cluster,
        workload.stream,
    )
}

//! Trace export: flat CSV spans and Chrome trace-event JSON.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};

use super::engine::{EventKind, IterationTimeline};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: u64,
    pub worker: usize,
    pub tensor: Option<usize>,
    pub kind: &'static str,
    pub start_ms: f64,
    pub end_ms: f64,
}

fn family(kind: EventKind) -> (&'static str, bool) {
    match kind {
        EventKind::ForwardStart => ("forward", true),
        EventKind::ForwardEnd => ("forward", false),
        EventKind::ComputeStart => ("compute", true),
        EventKind::ComputeEnd => ("compute", false),
        EventKind::CompressStart => ("compress", true),
        EventKind::CompressEnd => ("compress", false),
        EventKind::CommStart => ("comm", true),
        EventKind::CommEnd => ("comm", false),
    }
}

/// Start/end events paired into spans, ordered by start time.
pub fn spans(tl: &IterationTimeline) -> Vec<TraceRow> {
    let mut open: Vec<(usize, Option<usize>, &'static str, f64)> = Vec::new();
    let mut rows = Vec::new();
    for e in &tl.events {
        let (kind, is_start) = family(e.kind);
        if is_start {
            open.push((e.worker, e.tensor, kind, e.time));
        } else if let Some(pos) = open
            .iter()
            .position(|&(w, t, k, _)| w == e.worker && t == e.tensor && k == kind)
        {
            let (worker, tensor, kind, start) = open.remove(pos);
            rows.push(TraceRow {
                iter: tl.iter,
                worker,
                tensor,
                kind,
                start_ms: start,
                end_ms: e.time,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.start_ms
            .total_cmp(&b.start_ms)
            .then(a.worker.cmp(&b.worker))
            .then(a.tensor.cmp(&b.tensor))
            .then(a.kind.cmp(b.kind))
    });
    rows
}

/// `iter,worker,tensor,kind,start_ms,end_ms`; times are relative to the
/// start of each iteration.
pub fn write_trace_csv<W: Write>(out: W, timelines: &[IterationTimeline]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "worker", "tensor", "kind", "start_ms", "end_ms"])?;
    for tl in timelines {
        for r in spans(tl) {
            w.write_record([
                r.iter.to_string(),
                r.worker.to_string(),
                r.tensor.map(|t| t.to_string()).unwrap_or_default(),
                r.kind.to_string(),
                format!("{:.6}", r.start_ms),
                format!("{:.6}", r.end_ms),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Chrome trace-event document; iterations are laid end to end, one thread
/// row per worker.
pub fn chrome_trace(timelines: &[IterationTimeline]) -> Value {
    let mut events = Vec::new();
    let mut origin = 0.0;
    for tl in timelines {
        for r in spans(tl) {
            let name = match r.tensor {
                Some(t) => format!("{} t{t}", r.kind),
                None => r.kind.to_string(),
            };
            events.push(json!({
                "name": name,
                "cat": r.kind,
                "ph": "X",
                "pid": 0,
                "tid": r.worker,
                "ts": (origin + r.start_ms) * 1e3,
                "dur": (r.end_ms - r.start_ms) * 1e3,
                "args": { "iter": r.iter },
            }));
        }
        origin += tl.t_total;
    }
    json!({ "traceEvents": events, "displayTimeUnit": "ms" })
}

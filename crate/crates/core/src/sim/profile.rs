//! CCR measurement from per-worker traces.
//!
//! A worker that reaches a collective early records the wait for its peers
//! as communication. Aligning every collective at its common end and
//! measuring back to the last worker's start removes that wait.

use serde::Serialize;

use super::engine::{EventKind, IterationTimeline};
use crate::error::{CovapError, Result};
use crate::perf::{ccr, choose_interval};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub workers: usize,
    pub iterations: usize,
    pub t_before: f64,
    pub t_comp: f64,
    /// Collective time measured from the last worker's start.
    pub t_comm: f64,
    /// Per-worker sum of its own comm_start..comm_end spans.
    pub t_comm_naive: Vec<f64>,
    pub ccr: f64,
    /// CCR from the worst naive measurement.
    pub naive_ccr: f64,
    pub recommended_interval: u32,
}

impl ProfileReport {
    /// Relative overstatement of the worst naive measurement.
    pub fn naive_error(&self) -> f64 {
        let worst = self.t_comm_naive.iter().copied().fold(0.0, f64::max);
        if self.t_comm > 0.0 {
            worst / self.t_comm - 1.0
        } else {
            0.0
        }
    }
}

struct Measured {
    t_before: f64,
    t_comp: f64,
    t_comm: f64,
    naive: Vec<f64>,
}

fn measure(tl: &IterationTimeline, workers: usize) -> Result<Measured> {
    let mut seen = vec![false; workers];
    let mut fwd = vec![(None, None); workers];
    let mut comp = vec![0.0; workers];
    let mut naive = vec![0.0; workers];
    let mut comp_open: Vec<Vec<(usize, f64)>> = vec![Vec::new(); workers];
    // tensor -> (latest start, end, per-worker start)
    let mut comm: std::collections::BTreeMap<usize, (f64, Option<f64>, Vec<Option<f64>>)> =
        Default::default();

    for e in &tl.events {
        if e.worker >= workers {
            return Err(CovapError::invalid(format!(
                "event for worker {} but only {workers} expected",
                e.worker
            )));
        }
        seen[e.worker] = true;
        let w = e.worker;
        match (e.kind, e.tensor) {
            (EventKind::ForwardStart, _) => fwd[w].0 = Some(e.time),
            (EventKind::ForwardEnd, _) => fwd[w].1 = Some(e.time),
            (EventKind::ComputeStart, Some(t)) => comp_open[w].push((t, e.time)),
            (EventKind::ComputeEnd, Some(t)) => {
                if let Some(pos) = comp_open[w].iter().position(|&(ot, _)| ot == t) {
                    let (_, start) = comp_open[w].swap_remove(pos);
                    comp[w] += e.time - start;
                }
            }
            (EventKind::CommStart, Some(t)) => {
                let entry = comm
                    .entry(t)
                    .or_insert_with(|| (f64::NEG_INFINITY, None, vec![None; workers]));
                entry.0 = entry.0.max(e.time);
                entry.2[w] = Some(e.time);
            }
            (EventKind::CommEnd, Some(t)) => {
                let entry = comm
                    .entry(t)
                    .or_insert_with(|| (f64::NEG_INFINITY, None, vec![None; workers]));
                entry.1 = Some(entry.1.map_or(e.time, |x: f64| x.max(e.time)));
            }
            _ => {}
        }
    }
    if let Some(worker) = seen.iter().position(|s| !s) {
        return Err(CovapError::IncompleteProfile {
            worker,
            expected: workers,
        });
    }

    let mut t_comm = 0.0;
    for (&tensor, (last_start, end, starts)) in &comm {
        let end = end.ok_or_else(|| {
            CovapError::invalid(format!("collective for tensor {tensor} never ended"))
        })?;
        if let Some(worker) = starts.iter().position(Option::is_none) {
            return Err(CovapError::IncompleteProfile {
                worker,
                expected: workers,
            });
        }
        t_comm += end - last_start;
        for (w, s) in starts.iter().enumerate() {
            naive[w] += end - s.expect("checked above");
        }
    }
    let (fs, fe) = fwd[0];
    let t_before = match (fs, fe) {
        (Some(s), Some(e)) => e - s,
        _ => 0.0,
    };
    Ok(Measured {
        t_before,
        t_comp: comp.iter().copied().fold(0.0, f64::max),
        t_comm,
        naive,
    })
}

/// Aligned CCR over one or more iterations of traces from `workers` workers.
pub fn profile_ccr(timelines: &[IterationTimeline], workers: usize) -> Result<ProfileReport> {
    if timelines.is_empty() {
        return Err(CovapError::invalid("profile needs at least one iteration"));
    }
    if workers == 0 {
        return Err(CovapError::invalid("profile needs at least one worker"));
    }
    let n = timelines.len() as f64;
    let mut t_before = 0.0;
    let mut t_comp = 0.0;
    let mut t_comm = 0.0;
    let mut naive = vec![0.0; workers];
    for tl in timelines {
        let m = measure(tl, workers)?;
        t_before += m.t_before;
        t_comp += m.t_comp;
        t_comm += m.t_comm;
        for (acc, v) in naive.iter_mut().zip(&m.naive) {
            *acc += v;
        }
    }
    let (t_before, t_comp, t_comm) = (t_before / n, t_comp / n, t_comm / n);
    let naive: Vec<f64> = naive.into_iter().map(|v| v / n).collect();
    let ccr = ccr(t_comm, t_comp)?;
    let naive_worst = naive.iter().copied().fold(0.0, f64::max);
    Ok(ProfileReport {
        workers,
        iterations: timelines.len(),
        t_before,
        t_comp,
        t_comm,
        t_comm_naive: naive,
        ccr,
        naive_ccr: naive_worst / t_comp,
        recommended_interval: choose_interval(ccr),
    })
}

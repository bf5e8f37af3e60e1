//! Sweeps: cross products of cluster sizes and schemes, one simulated
//! cycle per point.

use serde::Serialize;

use super::{comm_time, simulate_iteration, IterationTimeline, SimScheme, Workload};
use crate::error::Result;
use crate::harness::config::{ExperimentConfig, IntervalSpec, Resolved};
use crate::par::{map_ordered, Parallelism};
use crate::perf::{ccr, choose_interval, PhaseTimes, SpeedupReport};
use crate::topology::allocate_buckets;

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub workers: u32,
    pub scheme: SimScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheme: String,
    pub name: &'static str,
    pub interval: Option<u32>,
    pub workers: u32,
    /// Simulated iterations (one full selection cycle).
    pub iterations: u64,
    pub t_iter_ms: f64,
    pub unoverlapped_ms: f64,
    /// `P * (t_before + t_comp) / t_iter`.
    pub speedup: f64,
    /// Speedup over worker count.
    pub efficiency: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub resolved: Resolved,
    pub report: SpeedupReport,
    pub rows: Vec<SweepRow>,
    /// Timelines of the configured scheme on the configured cluster.
    pub timelines: Vec<IterationTimeline>,
}

/// Points in output order: workers outer; COVAP ratios, then listed schemes.
/// Without a sweep, the configured compressor at the configured size.
pub fn sweep_points(cfg: &ExperimentConfig, resolved: &Resolved) -> Result<Vec<SweepPoint>> {
    let Some(sweep) = &cfg.sweep else {
        let base = cfg.sim_scheme(&cfg.compressor, resolved.interval)?;
        return Ok(vec![SweepPoint {
            workers: resolved.cluster.workers,
            scheme: base,
        }]);
    };
    let workers = if sweep.workers.is_empty() {
        vec![resolved.cluster.workers]
    } else {
        sweep.workers.clone()
    };
    let mut points = Vec::new();
    for &w in &workers {
        // An automatic interval follows the CCR of each cluster size.
        let interval = match cfg.covap.interval {
            IntervalSpec::Fixed(i) => i,
            IntervalSpec::Auto(_) => interval_for(resolved, w)?,
        };
        for &r in &sweep.ratios {
            let scheme = SimScheme::Covap {
                interval: r,
                convention: cfg.covap.convention,
            };
            points.push(SweepPoint { workers: w, scheme });
        }
        for c in &sweep.schemes {
            points.push(SweepPoint {
                workers: w,
                scheme: cfg.sim_scheme(c, interval)?,
            });
        }
        if sweep.ratios.is_empty() && sweep.schemes.is_empty() {
            points.push(SweepPoint {
                workers: w,
                scheme: cfg.sim_scheme(&cfg.compressor, interval)?,
            });
        }
    }
    Ok(points)
}

/// `choose_interval` of the dense CCR on `workers` workers.
pub fn interval_for(resolved: &Resolved, workers: u32) -> Result<u32> {
    if workers <= 1 {
        return Ok(1);
    }
    let cluster = resolved.cluster.with_workers(workers);
    let plan = allocate_buckets(&resolved.model, resolved.model.bucket_cap_bytes)?;
    let t_comm: f64 = plan
        .buckets
        .iter()
        .map(|b| comm_time(b.bytes, &cluster))
        .sum();
    Ok(choose_interval(ccr(t_comm, resolved.t_comp)?))
}

/// Simulates one full cycle of `scheme` and returns its timelines.
pub fn run_cycle(
    resolved: &Resolved,
    workers: u32,
    scheme: SimScheme,
) -> Result<(Workload, Vec<IterationTimeline>)> {
    let cluster = resolved.cluster.with_workers(workers);
    let wl = Workload::new(
        &resolved.model,
        resolved.t_before,
        resolved.t_comp,
        &cluster,
        scheme,
        resolved.stream,
    )?;
    let tls = (0..scheme.cycle_len())
        .map(|i| simulate_iteration(&wl, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((wl, tls))
}

pub fn evaluate(resolved: &Resolved, point: SweepPoint) -> Result<SweepRow> {
    let (wl, tls) = run_cycle(resolved, point.workers, point.scheme)?;
    let n = tls.len() as f64;
    let t_iter = tls.iter().map(|t| t.t_total).sum::<f64>() / n;
    let unoverlapped = tls.iter().map(|t| t.unoverlapped_comm).sum::<f64>() / n;
    let p = f64::from(point.workers);
    let speedup = if t_iter > 0.0 {
        p * wl.t_linear() / t_iter
    } else {
        p
    };
    Ok(SweepRow {
        scheme: point.scheme.label(),
        name: point.scheme.name(),
        interval: match point.scheme {
            SimScheme::Covap { interval, .. } => Some(interval),
            _ => None,
        },
        workers: point.workers,
        iterations: tls.len() as u64,
        t_iter_ms: t_iter,
        unoverlapped_ms: unoverlapped,
        speedup,
        efficiency: speedup / p,
    })
}

/// Analytic report from the phase totals, with the configured scheme's
/// first iteration as the compressed case.
pub fn analytic_report(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    base: &Workload,
) -> Result<SpeedupReport> {
    let dense = PhaseTimes::totals(resolved.t_before, resolved.t_comp, resolved.t_comm);
    let compressed = base.costs(0).phase_times(resolved.t_before);
    let mut report = SpeedupReport::compute(&dense, Some(&compressed), resolved.cluster.workers)?;
    if let Some(r) = &cfg.reference {
        report.check_reference(r.s_ovlp, r.s_ls, r.tolerance);
    }
    Ok(report)
}

pub fn run_experiment(cfg: &ExperimentConfig, mode: Parallelism) -> Result<ExperimentOutput> {
    let resolved = cfg.resolve()?;
    let base_scheme = cfg.sim_scheme(&cfg.compressor, resolved.interval)?;
    let (base, timelines) = run_cycle(&resolved, resolved.cluster.workers, base_scheme)?;
    let report = analytic_report(cfg, &resolved, &base)?;
    let points = sweep_points(cfg, &resolved)?;
    log::info!("evaluating {} sweep points ({mode:?})", points.len());
    let rows = map_ordered(mode, &points, |&p| evaluate(&resolved, p))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutput {
        resolved,
        report,
        rows,
        timelines,
    })
}

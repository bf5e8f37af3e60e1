//! The four subcommands as pure functions from config to outputs; the CLI
//! only parses flags and writes files.

use std::path::Path;

use serde_json::{json, Value};

use super::config::{ExperimentConfig, IntervalSpec, Resolved};
use super::report::{fmt_ms, json_bytes, CommandOutput, Provenance, Table};
use crate::error::{CovapError, Result};
use crate::par::Parallelism;
use crate::sim::experiment::{run_cycle, run_experiment};
use crate::sim::trace::{chrome_trace, write_trace_csv};
use crate::sim::{comm_time, profile_ccr, SimScheme};
use crate::topology::{allocate_buckets, median_numel, shard_plan};
use crate::trainer::{contraction_audit, train, write_run_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 3;

fn resolved_json(r: &Resolved) -> Value {
    json!({
        "t_before_ms": r.t_before,
        "t_comp_ms": r.t_comp,
        "t_comm_ms": r.t_comm,
        "ccr": r.ccr,
        "interval": r.interval,
        "workers": r.cluster.workers,
        "allreduce_efficiency": r.cluster.allreduce_efficiency,
        "compress_stream": r.stream,
    })
}

/// One skewed dense iteration through the aligned profiler, plus the same
/// iteration without skew for comparison.
pub fn cmd_profile(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let resolved = cfg.resolve()?;
    let workers = resolved.cluster.workers;
    let (_, skewed) = run_cycle(&resolved, workers, SimScheme::Dense)?;
    let report = profile_ccr(&skewed, workers as usize)?;
    let mut calm = resolved.clone();
    calm.cluster.skew_ms.clear();
    let (_, unskewed) = run_cycle(&calm, workers, SimScheme::Dense)?;
    let reference = profile_ccr(&unskewed, workers as usize)?;

    let mut table = Table::new("profile", &["quantity", "value"]);
    for (k, v) in [
        ("t_before_ms", fmt_ms(report.t_before)),
        ("t_comp_ms", fmt_ms(report.t_comp)),
        ("t_comm_ms", fmt_ms(report.t_comm)),
        ("ccr", format!("{:.4}", report.ccr)),
        (
            "recommended_interval",
            report.recommended_interval.to_string(),
        ),
        ("naive_ccr", format!("{:.4}", report.naive_ccr)),
        ("naive_error", format!("{:.4}", report.naive_error())),
        ("unskewed_ccr", format!("{:.4}", reference.ccr)),
    ] {
        table.push(vec![k.into(), v]);
    }
    let mut naive = Table::new(
        "naive per-worker comm",
        &["worker", "skew_ms", "naive_comm_ms"],
    );
    for (w, v) in report.t_comm_naive.iter().enumerate() {
        naive.push(vec![
            w.to_string(),
            fmt_ms(resolved.cluster.skew(w)),
            fmt_ms(*v),
        ]);
    }

    let summary = json!({
        "provenance": Provenance::new("profile", cfg)?,
        "profile": report,
        "naive_error": report.naive_error(),
        "unskewed": reference,
        "skew_invariant": report.ccr == reference.ccr,
    });
    let mut trace = Vec::new();
    write_trace_csv(&mut trace, &skewed)?;
    Ok(CommandOutput {
        artifacts: vec![
            ("profile.json".into(), json_bytes(&summary)?),
            ("profile_trace.csv".into(), trace),
            ("profile.csv".into(), table.to_csv()?),
        ],
        summary,
        tables: vec![table, naive],
        status: EXIT_OK,
    })
}

/// Buckets, median, shards and the effective tensor list.
pub fn cmd_plan(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let model = cfg.model_spec()?;
    let resolved = if cfg.timing.is_some() && cfg.cluster.is_some() {
        Some(cfg.resolve()?)
    } else {
        None
    };
    let interval = match (&resolved, cfg.covap.interval) {
        (Some(r), _) => r.interval,
        (None, IntervalSpec::Fixed(i)) => i,
        (None, IntervalSpec::Auto(_)) => {
            return Err(CovapError::config(
                "covap.interval",
                "\"auto\" needs timing and cluster sections; give a number",
            ))
        }
    };
    let plan = allocate_buckets(model, model.bucket_cap_bytes)?;
    let median = median_numel(&plan)?;
    let sharded = shard_plan(&plan, interval)?;
    let tensors = sharded.effective_tensors();

    let mut buckets = Table::new("buckets", &["bucket", "layers", "numel", "bytes", "parts"]);
    for b in &plan.buckets {
        let parts = sharded
            .effective_tensors()
            .iter()
            .filter(|t| t.parent_bucket == b.index)
            .count();
        buckets.push(vec![
            b.index.to_string(),
            b.layer_refs.len().to_string(),
            b.numel.to_string(),
            b.bytes.to_string(),
            parts.to_string(),
        ]);
    }
    let total_bytes: u64 = tensors.iter().map(|t| t.bytes).sum();
    let mut eff = Table::new(
        &format!("effective tensors (I = {interval})"),
        &[
            "tensor", "bucket", "offset", "numel", "bytes", "sharded", "comm_ms", "share",
        ],
    );
    let comm: Vec<Option<f64>> = tensors
        .iter()
        .map(|t| {
            resolved
                .as_ref()
                .filter(|r| r.cluster.workers > 1)
                .map(|r| comm_time(t.bytes, &r.cluster))
        })
        .collect();
    for (t, c) in tensors.iter().zip(&comm) {
        eff.push(vec![
            t.index.to_string(),
            t.parent_bucket.to_string(),
            t.offset.to_string(),
            t.numel.to_string(),
            t.bytes.to_string(),
            t.sharded.to_string(),
            c.map(fmt_ms).unwrap_or_default(),
            format!("{:.6}", t.bytes as f64 / total_bytes as f64),
        ]);
    }
    let summary = json!({
        "provenance": Provenance::new("plan", cfg)?,
        "interval": interval,
        "bucket_count": plan.buckets.len(),
        "median_numel": median.as_f64(),
        "effective_tensors": tensors.len(),
        "buckets": plan.buckets,
        "tensors": tensors,
        "timing": resolved.as_ref().map(resolved_json),
    });
    Ok(CommandOutput {
        artifacts: vec![
            ("plan.json".into(), json_bytes(&summary)?),
            ("buckets.csv".into(), buckets.to_csv()?),
            ("tensors.csv".into(), eff.to_csv()?),
        ],
        summary,
        tables: vec![buckets, eff],
        status: EXIT_OK,
    })
}

/// Sweep table, phase breakdown, analytic report and the base trace.
pub fn cmd_simulate(cfg: &ExperimentConfig, mode: Parallelism) -> Result<CommandOutput> {
    let out = run_experiment(cfg, mode)?;
    let r = &out.resolved;
    let mut sweep = Table::new(
        "sweep",
        &[
            "scheme",
            "interval",
            "workers",
            "iterations",
            "t_before_ms",
            "t_comp_ms",
            "t_iter_ms",
            "unoverlapped_ms",
            "speedup",
            "efficiency",
        ],
    );
    for row in &out.rows {
        sweep.push(vec![
            row.scheme.clone(),
            row.interval.map(|i| i.to_string()).unwrap_or_default(),
            row.workers.to_string(),
            row.iterations.to_string(),
            fmt_ms(r.t_before),
            fmt_ms(r.t_comp),
            fmt_ms(row.t_iter_ms),
            fmt_ms(row.unoverlapped_ms),
            format!("{:.6}", row.speedup),
            format!("{:.6}", row.efficiency),
        ]);
    }
    let rep = &out.report;
    let mut breakdown = Table::new("phase breakdown", &["quantity", "value"]);
    for (k, v) in [
        ("t_before_ms", r.t_before),
        ("t_comp_ms", r.t_comp),
        ("t_comm_ms", r.t_comm),
        ("ccr", rep.ccr),
        ("t_dp_ms", rep.t_dp),
        ("t_dp_ls_ms", rep.t_dp_ls),
        ("t_ovlp_ms", rep.t_ovlp),
        ("t_gc_ms", rep.t_gc),
        ("t_gc_ovlp_ms", rep.t_gc_ovlp),
        ("s_ovlp", rep.s_ovlp),
        ("s_ls", rep.s_ls),
        ("s_gc", rep.s_gc),
        ("s_gc_ovlp", rep.s_gc_ovlp),
        ("predicted_speedup_frac", rep.predicted_speedup_frac),
    ] {
        breakdown.push(vec![k.into(), fmt_ms(v)]);
    }
    breakdown.push(vec![
        "recommended_interval".into(),
        rep.recommended_interval.to_string(),
    ]);
    for f in &rep.flags {
        log::warn!("{f}");
    }

    let summary = json!({
        "provenance": Provenance::new("simulate", cfg)?,
        "resolved": resolved_json(r),
        "report": rep,
        "rows": out.rows,
    });
    let mut trace = Vec::new();
    write_trace_csv(&mut trace, &out.timelines)?;
    Ok(CommandOutput {
        artifacts: vec![
            ("report.json".into(), json_bytes(&summary)?),
            ("sweep.csv".into(), sweep.to_csv()?),
            ("breakdown.csv".into(), breakdown.to_csv()?),
            ("trace.csv".into(), trace),
            (
                "trace.chrome.json".into(),
                json_bytes(&chrome_trace(&out.timelines))?,
            ),
        ],
        summary,
        tables: vec![breakdown, sweep],
        status: EXIT_OK,
    })
}

/// Desk-scale training run; divergence still writes artifacts but exits 3.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let tc = cfg
        .train
        .as_ref()
        .ok_or_else(|| CovapError::config("train", "required by this command"))?;
    let compressor = cfg.train_compressor()?;
    let run = train(
        tc,
        &compressor,
        cfg.seed,
        Parallelism::from_threads(tc.threads),
    )?;
    let audit = contraction_audit(&run);
    let total_bytes: u64 = run.bytes.iter().sum();

    let mut table = Table::new("train", &["quantity", "value"]);
    for (k, v) in [
        ("steps", run.losses.len().to_string()),
        ("interval", run.interval.to_string()),
        ("tensors", run.tensor_numels.len().to_string()),
        ("final_loss", format!("{:.12e}", run.final_loss)),
        ("bytes_total", total_bytes.to_string()),
        ("dense_bytes_per_step", run.dense_bytes.to_string()),
        ("diverged", run.diverged.to_string()),
    ] {
        table.push(vec![k.into(), v]);
    }
    let summary = json!({
        "provenance": Provenance::new("train", cfg)?,
        "run": run,
        "bytes_total": total_bytes,
        "contraction": audit,
    });
    let mut csv = Vec::new();
    write_run_csv(&mut csv, &run)?;
    if run.diverged {
        log::error!("training diverged at step {:?}", run.divergence_step);
    }
    Ok(CommandOutput {
        artifacts: vec![
            ("train.csv".into(), csv),
            ("train.json".into(), json_bytes(&summary)?),
        ],
        summary,
        tables: vec![table],
        status: if run.diverged { EXIT_DIVERGED } else { EXIT_OK },
    })
}

pub fn write_artifacts(dir: &Path, out: &CommandOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in &out.artifacts {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

//! Closed-form iteration-time model: CCR, overlapped and compressed
//! iteration times, speedups and the interval rule.
//!
//! All times are milliseconds.

use serde::{Deserialize, Serialize};

use crate::error::{CovapError, Result};

/// Communication-to-computation ratio.
pub fn ccr(t_comm: f64, t_comp: f64) -> Result<f64> {
    if t_comp <= 0.0 {
        return Err(CovapError::UndefinedRatio(format!(
            "ccr with t_comp = {t_comp}"
        )));
    }
    Ok(t_comm / t_comp)
}

/// `max(1, ceil(ccr))`. Values within 1e-9 of an integer count as that
/// integer, so a measured 4.0000000001 still maps to 4.
pub fn choose_interval(ccr: f64) -> u32 {
    if !(ccr > 0.0) {
        return 1;
    }
    let nearest = ccr.round();
    let i = if (ccr - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        ccr.ceil()
    };
    (i.min(f64::from(u32::MAX)) as u32).max(1)
}

/// Where compression runs relative to backward compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressStream {
    /// Compression of tensor `i` runs on the compute stream right after its
    /// backward, delaying tensor `i + 1`.
    #[default]
    Compute,
    /// Compression has its own stream; backward never waits for it.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub t_before: f64,
    /// Total backward compute.
    pub t_comp: f64,
    /// Total communication actually sent (dense, or after compression).
    pub t_comm: f64,
    #[serde(default)]
    pub t_compress: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comp_i: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comm_i: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compress_i: Vec<f64>,
}

impl PhaseTimes {
    pub fn totals(t_before: f64, t_comp: f64, t_comm: f64) -> Self {
        PhaseTimes {
            t_before,
            t_comp,
            t_comm,
            ..Default::default()
        }
    }

    /// Totals split evenly over `b` tensors.
    pub fn uniform(t_before: f64, t_comp: f64, t_comm: f64, b: usize) -> Self {
        let n = b.max(1) as f64;
        PhaseTimes {
            t_before,
            t_comp,
            t_comm,
            t_compress: 0.0,
            comp_i: vec![t_comp / n; b],
            comm_i: vec![t_comm / n; b],
            compress_i: vec![0.0; b],
        }
    }

    pub fn per_tensor(t_before: f64, comp: Vec<f64>, comm: Vec<f64>, compress: Vec<f64>) -> Self {
        PhaseTimes {
            t_before,
            t_comp: comp.iter().sum(),
            t_comm: comm.iter().sum(),
            t_compress: compress.iter().sum(),
            comp_i: comp,
            comm_i: comm,
            compress_i: compress,
        }
    }

    pub fn with_compress(mut self, t_compress: f64) -> Self {
        self.t_compress = t_compress;
        self
    }

    pub fn has_per_tensor(&self) -> bool {
        !self.comp_i.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("t_before", self.t_before),
            ("t_comp", self.t_comp),
            ("t_comm", self.t_comm),
            ("t_compress", self.t_compress),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CovapError::invalid(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        if !self.has_per_tensor() {
            if self.comm_i.is_empty() && self.compress_i.is_empty() {
                return Ok(());
            }
            return Err(CovapError::invalid("per-tensor lists given without comp_i"));
        }
        let b = self.comp_i.len();
        if self.comm_i.len() != b || (!self.compress_i.is_empty() && self.compress_i.len() != b) {
            return Err(CovapError::invalid(format!(
                "per-tensor lists differ in length: comp {b}, comm {}, compress {}",
                self.comm_i.len(),
                self.compress_i.len()
            )));
        }
        let lists = [
            ("comp_i", &self.comp_i, self.t_comp),
            ("comm_i", &self.comm_i, self.t_comm),
            ("compress_i", &self.compress_i, self.t_compress),
        ];
        for (name, list, total) in lists {
            if list.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(CovapError::invalid(format!(
                    "{name} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = list.iter().sum();
            if !list.is_empty() && (sum - total).abs() > 1e-9 * total.abs().max(1.0) {
                return Err(CovapError::invalid(format!(
                    "{name} sums to {sum}, total says {total}"
                )));
            }
        }
        Ok(())
    }

    fn compress_list(&self) -> Vec<f64> {
        if self.compress_i.is_empty() {
            vec![0.0; self.comp_i.len()]
        } else {
            self.compress_i.clone()
        }
    }
}

/// Non-overlapped iteration: `T_before + T_comp + T_comm`.
pub fn t_dp(p: &PhaseTimes) -> f64 {
    p.t_before + p.t_comp + p.t_comm
}

/// Linear-scaling iteration: no communication at all.
pub fn t_dp_ls(p: &PhaseTimes) -> f64 {
    p.t_before + p.t_comp
}

/// Overlapped iteration from totals: the part of communication longer than
/// backward stays exposed (clamped at zero when compute-bound).
pub fn t_ovlp_totals(t_before: f64, t_comp: f64, t_comm: f64) -> f64 {
    t_before + t_comp + (t_comm - t_comp).max(0.0)
}

/// Overlapped iteration time. Uses the exact per-tensor recurrence when the
/// lists are present, otherwise the totals form.
pub fn t_ovlp(p: &PhaseTimes) -> Result<f64> {
    p.validate()?;
    if p.has_per_tensor() {
        let zeros = vec![0.0; p.comp_i.len()];
        Ok(overlap_recurrence(
            p.t_before,
            &p.comp_i,
            &zeros,
            &p.comm_i,
            CompressStream::Compute,
        )?
        .t_total)
    } else {
        Ok(t_ovlp_totals(p.t_before, p.t_comp, p.t_comm))
    }
}

/// Compressed, non-overlapped: `T_before + T_comp + T_compress + T_comm`.
pub fn t_gc(p: &PhaseTimes) -> f64 {
    p.t_before + p.t_comp + p.t_compress + p.t_comm
}

/// Compressed and overlapped. Compression sits on the compute stream, so it
/// lengthens the window communication can hide behind.
pub fn t_gc_ovlp(p: &PhaseTimes) -> Result<f64> {
    p.validate()?;
    if p.has_per_tensor() {
        let compress = p.compress_list();
        Ok(overlap_recurrence(
            p.t_before,
            &p.comp_i,
            &compress,
            &p.comm_i,
            CompressStream::Compute,
        )?
        .t_total)
    } else {
        let busy = p.t_comp + p.t_compress;
        Ok(p.t_before + busy + (p.t_comm - busy).max(0.0))
    }
}

/// `P * k / (k + ccr)` with `k = t_before / t_comp + 1`.
pub fn speedup_fraction(t_before: f64, t_comp: f64, ccr: f64, workers: u32) -> Result<f64> {
    if t_comp <= 0.0 {
        return Err(CovapError::UndefinedRatio("speedup with t_comp = 0".into()));
    }
    let k = t_before / t_comp + 1.0;
    Ok(f64::from(workers) * k / (k + ccr))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapSchedule {
    pub t_total: f64,
    /// Time backward (and compression) finishes.
    pub compute_end: f64,
    /// `(start, end)` of each tensor's collective; `None` when it sends nothing.
    pub comm: Vec<Option<(f64, f64)>>,
    /// Channel idle gaps between consecutive collectives: `(after_tensor, ms)`.
    pub bubbles: Vec<(usize, f64)>,
    pub unoverlapped_comm: f64,
}

/// Exact per-tensor overlap evaluator.
///
/// Tensor `i` occupies the compute side during `[s_i, e_i]` (backward, plus
/// compression when it shares the compute stream). Its collective streams
/// alongside: it can start once `s_i` is reached and the channel is free, and
/// cannot finish before `e_i`. So
/// `start_i = max(channel_free, s_i, e_i - comm_i)`, `end_i = start_i + comm_i`.
/// A zero `comm_i` means the tensor is not sent.
pub fn overlap_recurrence(
    t_before: f64,
    comp: &[f64],
    compress: &[f64],
    comm: &[f64],
    stream: CompressStream,
) -> Result<OverlapSchedule> {
    if comp.len() != compress.len() || comp.len() != comm.len() {
        return Err(CovapError::invalid(format!(
            "per-tensor lengths differ: comp {}, compress {}, comm {}",
            comp.len(),
            compress.len(),
            comm.len()
        )));
    }
    let mut compute_free = t_before;
    let mut compress_free = t_before;
    let mut channel_free = f64::NEG_INFINITY;
    let mut compute_end = t_before;
    let mut last: Option<(usize, f64)> = None;
    let mut sched = Vec::with_capacity(comp.len());
    let mut bubbles = Vec::new();

    for i in 0..comp.len() {
        let start = compute_free;
        let ready = match stream {
            CompressStream::Compute => {
                compute_free = compute_free + comp[i] + compress[i];
                compute_free
            }
            CompressStream::Separate => {
                compute_free += comp[i];
                compress_free = compress_free.max(compute_free) + compress[i];
                compress_free
            }
        };
        compute_end = compute_end.max(ready);
        if comm[i] <= 0.0 {
            sched.push(None);
            continue;
        }
        let c_start = channel_free.max(start).max(ready - comm[i]);
        let c_end = c_start + comm[i];
        if let Some((prev, prev_end)) = last {
            if c_start > prev_end {
                bubbles.push((prev, c_start - prev_end));
            }
        }
        channel_free = c_end;
        last = Some((i, c_end));
        sched.push(Some((c_start, c_end)));
    }
    let t_total = compute_end.max(channel_free);
    Ok(OverlapSchedule {
        t_total,
        compute_end,
        comm: sched,
        bubbles,
        unoverlapped_comm: (t_total - compute_end).max(0.0),
    })
}

/// One analytic row: iteration times and speedups for a model/cluster pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub ccr: f64,
    pub t_dp: f64,
    pub t_dp_ls: f64,
    pub t_ovlp: f64,
    pub t_gc: f64,
    pub t_gc_ovlp: f64,
    pub s_ovlp: f64,
    pub s_ls: f64,
    pub s_gc: f64,
    pub s_gc_ovlp: f64,
    pub predicted_speedup_frac: f64,
    pub recommended_interval: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl SpeedupReport {
    /// `dense` carries uncompressed communication; `compressed` (if any)
    /// carries the post-compression communication and its overhead.
    pub fn compute(
        dense: &PhaseTimes,
        compressed: Option<&PhaseTimes>,
        workers: u32,
    ) -> Result<Self> {
        dense.validate()?;
        let gc = compressed.unwrap_or(dense);
        let ccr = ccr(dense.t_comm, dense.t_comp)?;
        let t_dp = t_dp(dense);
        let t_dp_ls = t_dp_ls(dense);
        let t_ovlp = t_ovlp(dense)?;
        let t_gc = t_gc(gc);
        let t_gc_ovlp = t_gc_ovlp(gc)?;
        let ratio = |t: f64| if t > 0.0 { t_dp / t } else { f64::INFINITY };
        Ok(SpeedupReport {
            ccr,
            t_dp,
            t_dp_ls,
            t_ovlp,
            t_gc,
            t_gc_ovlp,
            s_ovlp: ratio(t_ovlp),
            s_ls: ratio(t_dp_ls),
            s_gc: ratio(t_gc),
            s_gc_ovlp: ratio(t_gc_ovlp),
            predicted_speedup_frac: speedup_fraction(dense.t_before, dense.t_comp, ccr, workers)?,
            recommended_interval: choose_interval(ccr),
            flags: Vec::new(),
        })
    }

    /// Compare against externally printed speedups; mismatches beyond `tol`
    /// are recorded as flags rather than errors.
    pub fn check_reference(&mut self, s_ovlp: Option<f64>, s_ls: Option<f64>, tol: f64) {
        for (name, printed, computed) in
            [("s_ovlp", s_ovlp, self.s_ovlp), ("s_ls", s_ls, self.s_ls)]
        {
            if let Some(p) = printed {
                if (p - computed).abs() > tol {
                    self.flags.push(format!(
                        "{name}: reference {p:.2} disagrees with {computed:.2} computed from the phase times"
                    ));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ccr_examples() {
        assert!(close(ccr(280.0, 135.0).unwrap(), 2.074, 1e-3));
        assert!(close(ccr(842.0, 210.0).unwrap(), 4.0095, 1e-4));
        assert_eq!(ccr(0.0, 100.0).unwrap(), 0.0);
        assert!(matches!(ccr(1.0, 0.0), Err(CovapError::UndefinedRatio(_))));
    }

    #[test]
    fn interval_rule() {
        assert_eq!(choose_interval(2.074), 3);
        assert_eq!(choose_interval(4.0), 4);
        assert_eq!(choose_interval(3.5), 4);
        assert_eq!(choose_interval(0.4), 1);
        assert_eq!(choose_interval(0.0), 1);
        assert_eq!(choose_interval(0.1 * 3.0 * 10.0), 3);
        assert_eq!(choose_interval(842.0 / 210.0), 5);
    }

    #[test]
    fn closed_forms() {
        assert_eq!(t_dp(&PhaseTimes::totals(55.0, 135.0, 280.0)), 470.0);
        assert_eq!(t_dp(&PhaseTimes::totals(105.0, 210.0, 842.0)), 1157.0);
        assert_eq!(
            t_ovlp(&PhaseTimes::totals(55.0, 135.0, 280.0)).unwrap(),
            335.0
        );
        assert_eq!(
            t_ovlp(&PhaseTimes::totals(80.0, 170.0, 520.0)).unwrap(),
            600.0
        );
        assert_eq!(
            t_ovlp(&PhaseTimes::totals(10.0, 100.0, 40.0)).unwrap(),
            110.0
        );

        let topk = PhaseTimes::totals(105.0, 210.0, 842.0 - 603.0).with_compress(1560.0);
        assert_eq!(t_gc(&topk), 2114.0);
        let fp16 = PhaseTimes::totals(105.0, 210.0, 842.0 - 423.0).with_compress(5.0);
        assert_eq!(t_gc(&fp16), 739.0);
        assert_eq!(
            t_gc_ovlp(&PhaseTimes::totals(55.0, 135.0, 100.0)).unwrap(),
            190.0
        );
    }

    #[test]
    fn speedup_fraction_examples() {
        let s = speedup_fraction(55.0, 135.0, 280.0 / 135.0, 64).unwrap();
        assert!(close(s, 25.87, 0.01));
        assert_eq!(speedup_fraction(55.0, 135.0, 0.0, 64).unwrap(), 64.0);
        assert_eq!(speedup_fraction(0.0, 10.0, 1.0, 8).unwrap(), 4.0);
    }

    #[test]
    fn consistent_table_rows() {
        let resnet =
            SpeedupReport::compute(&PhaseTimes::totals(55.0, 135.0, 280.0), None, 64).unwrap();
        assert!(close(resnet.s_ovlp, 1.43, 0.03) && close(resnet.s_ls, 2.47, 0.03));
        let bert =
            SpeedupReport::compute(&PhaseTimes::totals(80.0, 170.0, 520.0), None, 64).unwrap();
        assert!(close(bert.s_ovlp, 1.28, 0.03) && close(bert.s_ls, 3.08, 0.03));
        let mut vgg =
            SpeedupReport::compute(&PhaseTimes::totals(105.0, 210.0, 842.0), None, 64).unwrap();
        vgg.check_reference(Some(1.22), Some(3.04), 0.03);
        assert_eq!(vgg.flags.len(), 1);
        assert!(vgg.flags[0].starts_with("s_ls"));
    }

    #[test]
    fn sparse_baseline_sits_between_overlap_and_linear() {
        let params = 8 * 5_581_813;
        let compress = crate::baseline::compress_overhead_ms("randomk", params);
        let gc = PhaseTimes::totals(55.0, 135.0, 1.07 * 135.0).with_compress(compress);
        let r =
            SpeedupReport::compute(&PhaseTimes::totals(55.0, 135.0, 280.0), Some(&gc), 64).unwrap();
        assert!(r.s_ovlp < r.s_gc_ovlp && r.s_gc_ovlp < r.s_ls);
        assert!(r.s_gc < r.s_gc_ovlp);
    }

    #[test]
    fn recurrence_zero_comm_is_compute_bound() {
        let s = overlap_recurrence(
            20.0,
            &[5.0, 5.0, 5.0],
            &[0.0; 3],
            &[0.0; 3],
            CompressStream::Compute,
        )
        .unwrap();
        assert_eq!(s.t_total, 35.0);
        assert_eq!(s.unoverlapped_comm, 0.0);
    }

    #[test]
    fn recurrence_reports_bubbles() {
        let s = overlap_recurrence(
            0.0,
            &[1.0, 10.0],
            &[0.0; 2],
            &[1.0, 1.0],
            CompressStream::Compute,
        )
        .unwrap();
        assert_eq!(s.comm, vec![Some((0.0, 1.0)), Some((10.0, 11.0))]);
        assert_eq!(s.bubbles, vec![(0, 9.0)]);
        assert_eq!(s.t_total, 11.0);
    }

    #[test]
    fn separate_compress_stream_frees_backward() {
        let comp = [10.0, 10.0];
        let compress = [5.0, 5.0];
        let comm = [1.0, 1.0];
        let shared =
            overlap_recurrence(0.0, &comp, &compress, &comm, CompressStream::Compute).unwrap();
        let split =
            overlap_recurrence(0.0, &comp, &compress, &comm, CompressStream::Separate).unwrap();
        assert_eq!(shared.compute_end, 30.0);
        assert_eq!(split.compute_end, 25.0);
    }

    #[test]
    fn mismatched_lists_error() {
        let bad = PhaseTimes {
            comp_i: vec![1.0],
            comm_i: vec![1.0, 2.0],
            ..PhaseTimes::totals(0.0, 1.0, 3.0)
        };
        assert!(bad.validate().is_err());
        assert!(overlap_recurrence(0.0, &[1.0], &[0.0], &[], CompressStream::Compute).is_err());
    }

    proptest! {
        #[test]
        fn uniform_recurrence_matches_totals(
            tb in 0.0f64..500.0, tc in 0.1f64..1000.0, ccr in 1.0f64..8.0, b in 1usize..64,
        ) {
            let p = PhaseTimes::uniform(tb, tc, tc * ccr, b);
            let exact = t_ovlp(&p).unwrap();
            prop_assert!((exact - t_ovlp_totals(tb, tc, tc * ccr)).abs() < 1e-9);
        }

        #[test]
        fn bound_chain(tb in 0.0f64..300.0, tc in 0.1f64..500.0, ccr in 1.0f64..6.0, x in 0.0f64..300.0, f in 0.0f64..1.0) {
            let dense = PhaseTimes::totals(tb, tc, tc * ccr);
            let o = t_ovlp(&dense).unwrap();
            prop_assert!(t_dp_ls(&dense) <= o && o <= t_dp(&dense));
            let gc = PhaseTimes::totals(tb, tc, tc * ccr * f).with_compress(x);
            let go = t_gc_ovlp(&gc).unwrap();
            prop_assert!(t_dp_ls(&gc) <= go && go <= t_gc(&gc));
        }

        #[test]
        fn monotone_in_inputs(
            comp in proptest::collection::vec(0.0f64..50.0, 1..12),
            comm_seed in proptest::collection::vec(0.0f64..80.0, 12),
            which in 0usize..12, bump in 0.0f64..20.0, tb in 0.0f64..50.0,
        ) {
            let b = comp.len();
            let comm: Vec<f64> = comm_seed[..b].to_vec();
            let base = PhaseTimes::per_tensor(tb, comp.clone(), comm.clone(), vec![0.0; b]);
            let t0 = t_ovlp(&base).unwrap();
            let i = which % b;
            let mut c2 = comp.clone();
            c2[i] += bump;
            let mut m2 = comm.clone();
            m2[i] += bump;
            prop_assert!(t_ovlp(&PhaseTimes::per_tensor(tb, c2, comm.clone(), vec![0.0; b])).unwrap() >= t0);
            prop_assert!(t_ovlp(&PhaseTimes::per_tensor(tb, comp.clone(), m2, vec![0.0; b])).unwrap() >= t0);
            prop_assert!(t_ovlp(&PhaseTimes::per_tensor(tb + bump, comp, comm, vec![0.0; b])).unwrap() >= t0);
        }

        #[test]
        fn speedup_fraction_decreases_in_ccr(tb in 0.0f64..100.0, tc in 1.0f64..100.0, a in 0.0f64..10.0, d in 0.001f64..5.0) {
            let lo = speedup_fraction(tb, tc, a, 16).unwrap();
            let hi = speedup_fraction(tb, tc, a + d, 16).unwrap();
            prop_assert!(hi < lo);
        }
    }
}

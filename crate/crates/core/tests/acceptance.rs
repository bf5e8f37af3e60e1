//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs without the libtest harness so the lines always print.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use covap::baseline::{RandomK, TopK};
use covap::compress::{decompress, feedback_step, Compressor, CompressorState, EfSchedule};
use covap::covap::{is_selected, CovapConfig, CovapFilter, SelectionConvention};
use covap::harness::{
    cmd_plan, cmd_profile, cmd_simulate, cmd_train, CommandOutput, ExperimentConfig,
};
use covap::par::Parallelism;
use covap::perf::{
    choose_interval, overlap_recurrence, t_ovlp_totals, CompressStream, PhaseTimes, SpeedupReport,
};
use covap::sim::experiment::{evaluate, SweepPoint};
use covap::sim::{profile_ccr, simulate_costs, ClusterConfig, IterationCosts, SimScheme};
use covap::topology::{allocate_buckets, median_numel, shard_plan, ModelSpec};
use covap::trainer::model::ToyKind;
use covap::trainer::{train, TrainCompressor, TrainConfig, TrainRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1. Analytic speedups from phase totals.
fn table_one() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, tb, tc, tm, so, sl, flagged) in [
        ("resnet101", 55.0, 135.0, 280.0, 1.43, 2.47, false),
        ("bert", 80.0, 170.0, 520.0, 1.28, 3.08, false),
        ("vgg19", 105.0, 210.0, 842.0, 1.22, 3.04, true),
    ] {
        let mut r = SpeedupReport::compute(&PhaseTimes::totals(tb, tc, tm), None, 64).unwrap();
        r.check_reference(Some(so), Some(sl), 0.03);
        let ok = if flagged {
            r.flags.iter().any(|f| f.starts_with("s_ls"))
        } else {
            close(r.s_ovlp, so, 0.03) && close(r.s_ls, sl, 0.03) && r.flags.is_empty()
        };
        pass &= ok;
        notes.push(format!(
            "{name} S_ovlp {:.3} S_LS {:.3}{}",
            r.s_ovlp,
            r.s_ls,
            if flagged { " (flagged)" } else { "" }
        ));
    }
    // The bundled configs go through the same path.
    for (file, expect_flag) in [
        ("resnet101.json", false),
        ("bert.json", false),
        ("vgg19.json", true),
    ] {
        let out = cmd_simulate(&load(file), Parallelism::Sequential).unwrap();
        let flags = out.summary["report"]["flags"]
            .as_array()
            .map_or(0, Vec::len);
        pass &= (flags > 0) == expect_flag;
    }
    outcome(pass, notes.join("; "))
}

// 2. Sharding of the six-bucket list.
fn table_five() -> Outcome {
    let numels = [4101096, 16781312, 107480576, 7079424, 7669760, 555072];
    let model = ModelSpec::from_counts(&numels).with_cap(1);
    let plan = allocate_buckets(&model, 1).unwrap();
    let median = median_numel(&plan).unwrap();
    let count = |i: u32| shard_plan(&plan, i).unwrap().effective_count();
    let parts = |i: u32, b: usize| {
        shard_plan(&plan, i)
            .unwrap()
            .effective_tensors()
            .iter()
            .filter(|t| t.parent_bucket == b)
            .count()
    };
    let checks = [
        ("median 5590260", median.as_f64() == 5590260.0),
        ("3 shards", parts(19, 1) == 3),
        ("19 shards", parts(19, 2) == 19),
        ("26 tensors at I>=19", count(19) == 26 && count(40) == 26),
        ("8 tensors at I=2", count(2) == 8),
    ];
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "median {} shards {}/{} tensors {} (I=19) {} (I=2); failed: {:?}",
            median.as_f64(),
            parts(19, 1),
            parts(19, 2),
            count(19),
            count(2),
            failed
        ),
    )
}

// 3. Interval choice.
fn interval_selection() -> Outcome {
    let got = [
        choose_interval(2.074),
        choose_interval(4.0),
        choose_interval(3.5),
    ];
    let resolved = load("resnet101.json").resolve().unwrap().interval;
    outcome(
        got == [3, 4, 4] && resolved == 3,
        format!(
            "2.074->{} 4.0->{} 3.5->{} resnet101.json->{resolved}",
            got[0], got[1], got[2]
        ),
    )
}

fn random_cluster(rng: &mut ChaCha8Rng) -> ClusterConfig {
    ClusterConfig::new(rng.random_range(1..=8), 10.0)
}

// 4. Simulator against the closed form and the recurrence.
fn equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_uniform = 0.0f64;
    for _ in 0..1000 {
        let b = rng.random_range(1..=32);
        let t_before = rng.random_range(0.0..100.0);
        let t_comp = rng.random_range(1.0..500.0);
        let t_comm = t_comp * rng.random_range(1.0..6.0);
        let costs = IterationCosts {
            comp: vec![t_comp / b as f64; b],
            compress: vec![0.0; b],
            comm: vec![Some(t_comm / b as f64); b],
        };
        let tl = simulate_costs(
            0,
            t_before,
            &costs,
            &random_cluster(&mut rng),
            CompressStream::Compute,
        )
        .unwrap();
        worst_uniform =
            worst_uniform.max((tl.t_total - t_ovlp_totals(t_before, t_comp, t_comm)).abs());
    }
    let mut mismatches = 0;
    for case in 0..1000 {
        let b = rng.random_range(1..=24);
        let stream = if case % 2 == 0 {
            CompressStream::Compute
        } else {
            CompressStream::Separate
        };
        let comp: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..40.0)).collect();
        let compress: Vec<f64> = (0..b)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0.0..5.0)
                } else {
                    0.0
                }
            })
            .collect();
        let comm: Vec<Option<f64>> = (0..b)
            .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0.01..80.0)))
            .collect();
        let t_before = rng.random_range(0.0..50.0);
        let costs = IterationCosts {
            comp: comp.clone(),
            compress: compress.clone(),
            comm: comm.clone(),
        };
        let tl = simulate_costs(0, t_before, &costs, &random_cluster(&mut rng), stream).unwrap();
        let flat: Vec<f64> = comm.iter().map(|c| c.unwrap_or(0.0)).collect();
        let rec = overlap_recurrence(t_before, &comp, &compress, &flat, stream).unwrap();
        if tl.t_total != rec.t_total || tl.compute_end != rec.compute_end {
            mismatches += 1;
        }
    }
    outcome(
        worst_uniform < 1e-9 && mismatches == 0,
        format!(
            "uniform max |diff| {worst_uniform:.3e} ms; recurrence mismatches {mismatches}/1000"
        ),
    )
}

// 5. Full overlap at I = ceil(CCR) and flattening of the ratio sweep.
fn full_overlap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failing = 0;
    let mut worst_tail = 0.0f64;
    let total = 200;
    for _ in 0..total {
        let b = rng.random_range(2..=32);
        let t_comp = rng.random_range(10.0..300.0);
        let ccr = rng.random_range(1.0..6.0);
        let interval = choose_interval(ccr);
        let comp_i = t_comp / b as f64;
        let t_before = comp_i + rng.random_range(0.0..100.0);
        let mut ok = true;
        for iter in 0..u64::from(interval) {
            let comm = (0..b)
                .map(|t| {
                    is_selected(SelectionConvention::Narrative, iter, interval, t)
                        .then_some(ccr * comp_i)
                })
                .collect();
            let costs = IterationCosts {
                comp: vec![comp_i; b],
                compress: vec![0.0; b],
                comm,
            };
            let tl = simulate_costs(
                iter,
                t_before,
                &costs,
                &ClusterConfig::new(4, 10.0),
                CompressStream::Compute,
            )
            .unwrap();
            worst_tail = worst_tail.max(tl.unoverlapped_comm);
            ok &= tl.unoverlapped_comm == 0.0 && close(tl.t_total, t_before + t_comp, 1e-9);
        }
        failing += usize::from(!ok);
    }

    let mut flat_notes = Vec::new();
    let mut flat_ok = true;
    for file in ["fig5-resnet101.json", "fig5-vgg19.json", "fig5-bert.json"] {
        let cfg = load(file);
        let resolved = cfg.resolve().unwrap();
        let i = resolved.interval;
        let speed = |interval: u32| {
            let scheme = SimScheme::Covap {
                interval,
                convention: SelectionConvention::Narrative,
            };
            evaluate(
                &resolved,
                SweepPoint {
                    workers: resolved.cluster.workers,
                    scheme,
                },
            )
            .unwrap()
            .speedup
        };
        let (s1, si, sn) = (speed(1), speed(i), speed(i + 1));
        let rel = (sn - si) / (si - s1);
        flat_ok &= rel < 0.02;
        flat_notes.push(format!("{file} I={i} tail gain {:.2}%", rel * 100.0));
    }
    outcome(
        failing == 0 && flat_ok,
        format!(
            "{failing}/{total} uniform configs leave comm exposed (worst {worst_tail:.3} ms); {}",
            flat_notes.join(", ")
        ),
    )
}

fn equal_tensors(rng: &mut ChaCha8Rng, count: usize, each: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..each).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

// 6. Phase-averaged contraction of the filter.
fn contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for interval in [2u32, 3, 4, 8] {
        for each in [1usize, 7, 100, 2730] {
            // 24 tensors divide evenly for every interval tested; d <= 65520.
            let x = equal_tensors(&mut rng, 24, each);
            let shapes = vec![each; 24];
            let norm: f64 = x.iter().flatten().map(|v| v * v).sum();
            let mut filter = CovapFilter {
                interval,
                convention: SelectionConvention::Narrative,
            };
            let mut residual = 0.0;
            for s in 0..u64::from(interval) {
                let sent = decompress(&filter.compress(s, &x).unwrap(), &shapes).unwrap();
                residual += x
                    .iter()
                    .flatten()
                    .zip(sent.iter().flatten())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            let ratio = residual / f64::from(interval) / norm;
            let target = 1.0 - 1.0 / f64::from(interval);
            worst = worst.max((ratio - target).abs() / target);
        }
    }
    outcome(worst < 1e-9, format!("max relative deviation {worst:.3e}"))
}

// 7. Error feedback conserves gradient mass with coefficient 1.
fn conservation() -> Outcome {
    let shapes = [5usize, 17, 1, 64, 9];
    let mut notes = Vec::new();
    let mut pass = true;
    let compressors: Vec<(&str, Box<dyn Compressor>)> = vec![
        (
            "covap",
            Box::new(CovapFilter {
                interval: 3,
                convention: SelectionConvention::Narrative,
            }),
        ),
        ("topk", Box::new(TopK { k_fraction: 0.1 })),
        (
            "randomk",
            Box::new(RandomK {
                k_fraction: 0.2,
                seed: 9,
            }),
        ),
    ];
    for (name, mut c) in compressors {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = CompressorState::new(&shapes);
        let schedule = EfSchedule::constant_one();
        let mut grad_sum: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        let mut sent_sum = grad_sum.clone();
        for _ in 0..1000 {
            let g: Vec<Vec<f64>> = shapes
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|_| f64::from(rng.random_range(-50i32..=50)))
                        .collect()
                })
                .collect();
            let (update, _) = feedback_step(c.as_mut(), &schedule, &mut state, &g).unwrap();
            let sent = decompress(&update, &shapes).unwrap();
            for (acc, v) in grad_sum.iter_mut().flatten().zip(g.iter().flatten()) {
                *acc += v;
            }
            for (acc, v) in sent_sum.iter_mut().flatten().zip(sent.iter().flatten()) {
                *acc += v;
            }
        }
        let exact = sent_sum
            .iter()
            .flatten()
            .zip(state.residuals.iter().flatten())
            .zip(grad_sum.iter().flatten())
            .all(|((s, r), g)| s + r == *g);
        pass &= exact;
        notes.push(format!(
            "{name} {}",
            if exact { "exact" } else { "MISMATCH" }
        ));
    }
    outcome(pass, notes.join(", "))
}

fn linreg(steps: u64) -> TrainConfig {
    TrainConfig {
        objective: ToyKind::LinearRegression,
        dim: 1024,
        hidden: 0,
        layers: vec![64, 64, 128, 512, 256],
        bucket_cap_bytes: 1024,
        workers: 4,
        samples_per_worker: 512,
        steps,
        lr: 0.05,
        noise: 0.5,
        threads: 0,
    }
}

fn covap_run(cfg: &TrainConfig, interval: u32, ef: EfSchedule, seed: u64) -> TrainRun {
    let c = TrainCompressor::Covap(CovapConfig {
        interval,
        ef,
        convention: SelectionConvention::Narrative,
    });
    train(cfg, &c, seed, Parallelism::Sequential).unwrap()
}

fn same_bits(a: &TrainRun, b: &TrainRun) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    bits(&a.losses) == bits(&b.losses)
        && bits(&a.final_params) == bits(&b.final_params)
        && a.bytes == b.bytes
}

// 8. Desk-scale convergence.
fn convergence() -> Outcome {
    let steps = 2000;
    let cfg = linreg(steps);
    let per_seed = std::thread::scope(|s| {
        let handles: Vec<_> = [11u64, 22, 33]
            .into_iter()
            .map(|seed| {
                let cfg = &cfg;
                s.spawn(move || {
                    let dense =
                        train(cfg, &TrainCompressor::None, seed, Parallelism::Sequential).unwrap();
                    let on = covap_run(cfg, 4, EfSchedule::for_total_steps(steps), seed);
                    let off = covap_run(cfg, 4, EfSchedule::disabled(), seed);
                    (seed, dense.final_loss, on.final_loss, off.final_loss)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect::<Vec<_>>()
    });
    let short = linreg(50);
    let dense = train(&short, &TrainCompressor::None, 5, Parallelism::Sequential).unwrap();
    let one = covap_run(&short, 1, EfSchedule::default(), 5);
    let identical = same_bits(&dense, &one);

    let mut pass = identical;
    let mut notes = Vec::new();
    for (seed, dense, on, off) in per_seed {
        let rel = (on - dense).abs() / dense;
        pass &= rel <= 0.05 && off > on;
        notes.push(format!(
            "seed {seed}: dense {dense:.5} ef-on {on:.5} ({:+.2}%) ef-off {off:.5}",
            rel * 100.0
        ));
    }
    notes.push(format!("I=1 bit-identical {identical}"));
    outcome(pass, notes.join("; "))
}

fn skewed_iteration(
    skew: Vec<f64>,
    comp: &[f64],
    comm: &[f64],
    t_before: f64,
) -> covap::sim::IterationTimeline {
    let mut cluster = ClusterConfig::new(skew.len() as u32, 10.0);
    cluster.skew_ms = skew;
    let costs = IterationCosts {
        comp: comp.to_vec(),
        compress: vec![0.0; comp.len()],
        comm: comm.iter().map(|&c| Some(c)).collect(),
    };
    simulate_costs(0, t_before, &costs, &cluster, CompressStream::Compute).unwrap()
}

// 9. Aligned profiling is skew invariant; the naive one is not.
fn profiler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Multiples of 2^-10 keep every sum exact.
    let dyadic = |rng: &mut ChaCha8Rng, hi: u32| f64::from(rng.random_range(0..hi * 1024)) / 1024.0;
    let mut exact = 0;
    let mut worst_rel = 0.0f64;
    let trials = 300;
    for trial in 0..trials {
        let workers = rng.random_range(2..=8usize);
        let b = rng.random_range(1..=12usize);
        let use_dyadic = trial % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng, hi: u32| {
            if use_dyadic {
                dyadic(rng, hi)
            } else {
                rng.random_range(0.0..f64::from(hi))
            }
        };
        let comp: Vec<f64> = (0..b).map(|_| draw(&mut rng, 40) + 1.0).collect();
        let comm: Vec<f64> = (0..b).map(|_| draw(&mut rng, 80) + 1.0).collect();
        let t_before = draw(&mut rng, 50);
        let skew: Vec<f64> = (0..workers).map(|_| draw(&mut rng, 60)).collect();
        let calm = profile_ccr(
            &[skewed_iteration(vec![0.0; workers], &comp, &comm, t_before)],
            workers,
        )
        .unwrap();
        let skewed =
            profile_ccr(&[skewed_iteration(skew, &comp, &comm, t_before)], workers).unwrap();
        if use_dyadic {
            exact += usize::from(calm.ccr == skewed.ccr);
        } else {
            worst_rel = worst_rel.max((calm.ccr - skewed.ccr).abs() / calm.ccr);
        }
    }
    // One worker 20 ms late on a 100 ms collective.
    let scenario = profile_ccr(
        &[skewed_iteration(
            vec![0.0, 20.0, 0.0, 0.0],
            &[50.0],
            &[100.0],
            10.0,
        )],
        4,
    )
    .unwrap();
    let err = scenario.naive_error();
    let pass = exact == trials / 2
        && worst_rel < 1e-9
        && (0.1..=0.5).contains(&err)
        && scenario.ccr == 2.0;
    outcome(
        pass,
        format!(
            "dyadic exact {exact}/{}; float max rel {worst_rel:.2e}; naive overstatement {:.0}% (aligned CCR {})",
            trials / 2,
            err * 100.0,
            scenario.ccr
        ),
    )
}

fn run_config(cfg: &ExperimentConfig, mode: Parallelism) -> Vec<CommandOutput> {
    if cfg.train.is_some() {
        return vec![cmd_train(cfg).unwrap()];
    }
    let mut outs = vec![cmd_plan(cfg).unwrap()];
    if cfg.timing.is_some() && cfg.cluster.is_some() {
        outs.push(cmd_simulate(cfg, mode).unwrap());
        outs.push(cmd_profile(cfg).unwrap());
    }
    outs
}

// 10. Two runs of every bundled config give byte-identical artifacts.
fn determinism() -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut artifacts = 0;
    let mut differing = Vec::new();
    for f in &files {
        let cfg = ExperimentConfig::load(f).unwrap();
        let a = run_config(&cfg, Parallelism::Sequential);
        let b = run_config(&cfg, Parallelism::Threads(4));
        for (x, y) in a.iter().zip(&b) {
            artifacts += x.artifacts.len();
            if x.artifacts != y.artifacts {
                differing.push(f.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    outcome(
        differing.is_empty() && !files.is_empty(),
        format!(
            "{} configs, {artifacts} artifacts; differing: {differing:?}",
            files.len()
        ),
    )
}

fn main() {
    // libtest flags such as --list or a name filter are accepted and ignored,
    // except --list which must print nothing runnable.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        (
            "1 table-one analytic speedups",
            Duration::from_secs(1),
            table_one,
        ),
        ("2 table-five sharding", Duration::from_secs(1), table_five),
        (
            "3 interval selection",
            Duration::from_secs(1),
            interval_selection,
        ),
        (
            "4 simulator equivalence",
            Duration::from_secs(30),
            equivalence,
        ),
        (
            "5 full overlap and sweep flattening",
            Duration::from_secs(10),
            full_overlap,
        ),
        (
            "6 contraction identity",
            Duration::from_secs(5),
            contraction,
        ),
        (
            "7 error-feedback conservation",
            Duration::from_secs(10),
            conservation,
        ),
        (
            "8 desk-scale convergence",
            Duration::from_secs(60),
            convergence,
        ),
        ("9 profiler alignment", Duration::from_secs(5), profiler),
        (
            "10 determinism of bundled configs",
            Duration::from_secs(600),
            determinism,
        ),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        let time_note = if in_time {
            String::new()
        } else {
            format!(" [over budget {budget:?}]")
        };
        println!(
            "{} criterion {name} ({:.2}s): {}{time_note}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

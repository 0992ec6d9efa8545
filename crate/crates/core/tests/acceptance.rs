use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusedcomm::program::json::Bindings;
use fusedcomm::program::{canonical_form, Layout, Op, Program, Reducer};
use fusedcomm::runtime::bucket::{build_bucket_table, metadata_bytes, scattered_collective, CollectiveKind};
use fusedcomm::runtime::{
    pipeline_time, plan, ring_all_gather, ring_all_reduce, ring_reduce_scatter, CommConfig, ExecMode, Protocol,
    Resource, Stage,
};
use fusedcomm::session::{load_program, load_schedule, Reference};
use fusedcomm::transform::{apply_schedule, Schedule};
use fusedcomm::tune::{enumerate_schedules, tune, TuneConfig};
use fusedcomm::value::Tensor;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden(name: &str) -> PathBuf {
    root().join("goldens").join(name)
}

fn schedule(name: &str) -> Schedule {
    load_schedule(&root().join("schedules").join(name)).expect("schedule loads")
}

fn program(name: &str, ranks: usize, sizes: &str) -> Program {
    let mut b = Bindings::new(ranks);
    b.parse_assignments(sizes).expect("sizes parse");
    load_program(&golden(name), &b).expect("program loads")
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
}

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn semantics_preservation() -> Outcome {
    let start = Instant::now();
    let mut cases = vec![];
    for w in [2, 4] {
        cases.push(("model_parallel.json", w, "B=2,S=8,H=64".to_string()));
        cases.push(("pipeline.json", w, "B=2,S=8,H=64".to_string()));
        for e in [10, 14, 18] {
            cases.push(("adam.json", w, format!("N={}", 1usize << e)));
        }
    }
    let cfg = TuneConfig::default();
    let (mut schedules, mut worst) = (0, 0.0f64);
    for (name, w, sizes) in &cases {
        let p = program(name, *w, sizes);
        let reference = Reference::new(&p, 11).map_err(|e| e.to_string())?;
        for s in enumerate_schedules(&p, &cfg) {
            let r = reference.run(&s, &cfg.comm, ExecMode::Threaded).map_err(|e| format!("{name} W={w} {s}: {e}"))?;
            let d = r.deviation.unwrap_or(f64::INFINITY);
            ensure(d <= 1e-5, || format!("{name} W={w} {sizes} [{s}] deviates by {d:e}"))?;
            worst = worst.max(d);
            schedules += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} programs, {schedules} schedules, max deviation {worst:.2e}, {secs:.1}s", cases.len()))
}

fn collective_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = CommConfig::default();
    let mut worst = 0.0f64;
    for case in 0..200 {
        let w = [2, 4, 8][rng.gen_range(0..3)];
        let n = 1usize << rng.gen_range(10..=16);
        let inputs: Vec<Tensor> = (0..w).map(|_| random_tensor(&mut rng, n)).collect();
        let rs = ring_reduce_scatter(&cfg, &inputs, Reducer::Sum).map_err(|e| e.to_string())?;
        let ag = ring_all_gather(&cfg, &rs.outputs).map_err(|e| e.to_string())?;
        let ar = ring_all_reduce(&cfg, &inputs, Reducer::Sum).map_err(|e| e.to_string())?;
        let exact: Vec<f64> = (0..n).map(|i| inputs.iter().map(|t| t.data[i] as f64).sum()).collect();
        let scale = exact.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
        for rank in 0..w {
            for (a, b) in ag.outputs[rank].data.iter().zip(&ar.outputs[rank].data) {
                worst = worst.max((*a as f64 - *b as f64).abs() / scale);
            }
            for (a, x) in ar.outputs[rank].data.iter().zip(&exact) {
                worst = worst.max((*a as f64 - x).abs() / scale);
            }
        }
        ensure(worst <= 1e-5, || format!("case {case}: W={w} N={n} deviation {worst:e}"))?;
        let one_way = ((w - 1) * n * 4 / w) as u64;
        for rank in 0..w {
            let got = (rs.counters[rank].comm_bytes, ag.counters[rank].comm_bytes, ar.counters[rank].comm_bytes);
            ensure(got == (one_way, one_way, 2 * one_way), || {
                format!("case {case}: W={w} N={n} rank {rank} bytes {got:?}, expected ({one_way}, {one_way}, {})", 2 * one_way)
            })?;
        }
    }
    Ok(format!("200 cases, max deviation {worst:.2e}, byte counters exact"))
}

fn schedule_reproduction() -> Outcome {
    let (w, n) = (4, 1usize << 16);
    let adam = program("adam.json", w, &format!("N={n}"));
    let fused = apply_schedule(&adam, &schedule("adam_fused.json")).map_err(|e| e.to_string())?.program;
    let steps = plan(&fused).steps;
    let fars = steps.iter().filter(|s| s.kind == "fused_all_reduce").count();
    ensure(steps.len() == 1 && fars == 1, || format!("adam plan has {} steps, {fars} fused all-reduce", steps.len()))?;
    for t in ["m", "v"] {
        let layout = fused.tensor(t).expect("declared").layout;
        ensure(layout == Layout::Sliced(0), || format!("{t} is {layout}"))?;
    }
    let report = Reference::new(&adam, 3).and_then(|r| r.check(&fused, &CommConfig::default(), ExecMode::Threaded));
    let report = report.map_err(|e| e.to_string())?;
    for t in ["m", "v"] {
        let elems = &report.tensor_elems[t];
        ensure(elems.iter().all(|&e| e == n / w), || format!("{t} holds {elems:?} elements per rank"))?;
    }

    let pipe = program("pipeline.json", w, "B=2,S=8,H=64");
    let t = apply_schedule(&pipe, &schedule("pipeline_overlap.json")).map_err(|e| e.to_string())?.program;
    let overlaps: Vec<&Vec<String>> = t
        .nodes
        .iter()
        .filter_map(|n| match &n.op {
            Op::Overlap { members } => Some(members),
            _ => None,
        })
        .collect();
    ensure(overlaps.len() == 1, || format!("{} overlap groups", overlaps.len()))?;
    let kinds: Vec<&str> = overlaps[0].iter().map(|m| t.node(m).expect("member").op.kind_name()).collect();
    for k in ["reduce_scatter", "fused_send", "all_gather"] {
        ensure(kinds.contains(&k), || format!("overlap members {kinds:?} lack {k}"))?;
    }
    let reference = Reference::new(&pipe, 3).map_err(|e| e.to_string())?;
    let cfg = CommConfig::default();
    let base = reference.run(&Schedule::default(), &cfg, ExecMode::Threaded).map_err(|e| e.to_string())?;
    let opt = reference.check(&t, &cfg, ExecMode::Threaded).map_err(|e| e.to_string())?;
    let group = w / 2;
    for r in 0..w {
        ensure(base.p2p_bytes[r] == opt.p2p_bytes[r] * group as u64, || {
            format!("rank {r}: p2p bytes {} before, {} after", base.p2p_bytes[r], opt.p2p_bytes[r])
        })?;
    }
    let (before, after): (u64, u64) = (base.p2p_bytes.iter().sum(), opt.p2p_bytes.iter().sum());
    ensure(after > 0, || "no inter-group traffic".into())?;
    Ok(format!("adam: 1 fused step, m/v {} elems per rank; pipeline: inter-group bytes {before} -> {after}", n / w))
}

fn scattered_tensors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let w = [1, 2, 4][rng.gen_range(0..3)];
        let count = rng.gen_range(1..8);
        let sizes: Vec<usize> = (0..count).map(|_| w * rng.gen_range(1..1500)).collect();
        let total: usize = sizes.iter().sum();
        let names: Vec<String> = (0..count).map(|i| format!("t{i}")).collect();
        let table = build_bucket_table(&names.iter().map(String::as_str).zip(sizes.iter().copied()).collect::<Vec<_>>());
        let inputs: Vec<Vec<Tensor>> = (0..w).map(|_| sizes.iter().map(|&s| random_tensor(&mut rng, s)).collect()).collect();
        let cfg = CommConfig { buffer_tile_elems: 2048, ..CommConfig::default() };
        let kind = if rng.gen_bool(0.5) { CollectiveKind::AllReduce } else { CollectiveKind::Broadcast { root: rng.gen_range(0..w) } };
        let scattered = scattered_collective(&cfg, &table, &inputs, kind, Reducer::Sum, None).map_err(|e| e.to_string())?;
        for (m, &s) in sizes.iter().enumerate() {
            let member: Vec<Tensor> = inputs.iter().map(|ts| ts[m].clone()).collect();
            let expected: Vec<Vec<f32>> = match kind {
                CollectiveKind::AllReduce => {
                    ring_all_reduce(&cfg, &member, Reducer::Sum).map_err(|e| e.to_string())?.outputs.into_iter().map(|t| t.data).collect()
                }
                CollectiveKind::Broadcast { root } => vec![member[root].data.clone(); w],
            };
            for r in 0..w {
                ensure(scattered.tensors[r][m].data == expected[r], || format!("case {case}: W={w} member {m} ({s} elems) differs on rank {r}"))?;
            }
        }
        ensure(table.metadata_bytes() as u64 >= metadata_bytes(total as u64), || format!("case {case}: metadata"))?;
    }
    for n in [1u64, 1023, 1024, 1025, 1 << 20, 334_000_000] {
        ensure(metadata_bytes(n) == 12 * n.div_ceil(1024), || format!("metadata for {n}"))?;
    }
    let pct = 100.0 * metadata_bytes(334_000_000) as f64 / (2.0 * 334_000_000.0);
    ensure((pct - 0.59).abs() < 0.01, || format!("overhead {pct:.4}%"))?;
    Ok(format!("50 random lists exact, overhead at 334M fp16 elements {pct:.3}%"))
}

fn overlap_suite() -> Outcome {
    let p = program("model_parallel.json", 4, "B=2,S=8,H=64");
    let reference = Reference::new(&p, 5).map_err(|e| e.to_string())?;
    let (seq_s, ol_s) = (schedule("mp_fuse.json"), schedule("mp_overlap.json"));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ratio_max = 0.0f64;
    for case in 0..100 {
        let channels = [1, 2, 4][rng.gen_range(0..3)];
        let cfg = CommConfig {
            channels,
            buffer_tile_elems: channels * 4 * [1, 4, 16, 64, 256][rng.gen_range(0..5)],
            protocol: if rng.gen_bool(0.5) { Protocol::Simple } else { Protocol::LowLatency },
            alpha: rng.gen_range(0.0..5.0),
            beta: rng.gen_range(10.0..5000.0),
            gamma: rng.gen_range(10.0..5000.0),
            lambda: rng.gen_range(0.0..10.0),
        };
        let mode = if case % 2 == 0 { ExecMode::Threaded } else { ExecMode::RoundRobin };
        let seq = reference.run(&seq_s, &cfg, mode).map_err(|e| e.to_string())?;
        let ol = reference.run(&ol_s, &cfg, mode).map_err(|e| e.to_string())?;
        ensure(seq.results.outputs[0].1 == ol.results.outputs[0].1, || format!("case {case}: outputs differ"))?;
        ensure(ol.simulated_time <= seq.simulated_time * (1.0 + 1e-12), || {
            format!("case {case}: overlapped {} > sequential {}", ol.simulated_time, seq.simulated_time)
        })?;
    }
    for chunks in [8, 16, 64, 256] {
        for t in [0.5, 3.0, 100.0] {
            let stages = [Stage { resource: Resource::Compute(0), time: t }, Stage { resource: Resource::Net(0), time: t }];
            let ratio = pipeline_time(&stages, chunks) / (2.0 * t);
            ratio_max = ratio_max.max(ratio);
            ensure(ratio <= 0.6, || format!("{chunks} chunks: ratio {ratio}"))?;
        }
    }
    Ok(format!("outputs identical, overlapped <= sequential on 100 cfgs, balanced ratio <= {ratio_max:.4}"))
}

fn autotuner_suite() -> Outcome {
    let cfg = TuneConfig::default();
    let programs = [
        program("model_parallel.json", 4, "B=2,S=8,H=64"),
        program("adam.json", 4, "N=65536"),
        program("pipeline.json", 4, "B=2,S=8,H=64"),
    ];
    let mut families = Vec::new();
    for p in &programs {
        let report = tune(p, &cfg).map_err(|e| e.to_string())?;
        let schedules = enumerate_schedules(p, &cfg);
        let keys: Vec<String> = schedules.iter().map(Schedule::key).collect();
        let again: Vec<String> = enumerate_schedules(p, &cfg).iter().map(Schedule::key).collect();
        ensure(keys == again, || format!("{}: enumeration differs between runs", p.name))?;
        ensure(keys.iter().collect::<HashSet<_>>().len() == keys.len(), || format!("{}: duplicate schedules", p.name))?;
        let mut forms = HashSet::new();
        let reference = Reference::new(p, cfg.seed).map_err(|e| e.to_string())?;
        let mut times = Vec::new();
        for s in &schedules {
            let t = apply_schedule(p, s).map_err(|e| e.to_string())?.program;
            ensure(forms.insert(canonical_form(&t)), || format!("{}: isomorphic candidates", p.name))?;
            let r = reference.check(&t, &cfg.comm, ExecMode::RoundRobin).map_err(|e| e.to_string())?;
            times.push(r.simulated_time);
        }
        let best = times.iter().copied().fold(f64::INFINITY, f64::min);
        let winner_key = report.best().directives.key();
        let at = keys.iter().position(|k| *k == winner_key).ok_or("winner is not an enumerated schedule")?;
        ensure(times[at] <= best * (1.0 + 1e-9), || format!("{}: winner {} vs argmin {best}", p.name, times[at]))?;
        families.push(format!("{} {}", p.name, report.best().family));
    }

    let mut cfg0 = TuneConfig::default();
    cfg0.comm.lambda = 0.0;
    let f0 = tune(&program("adam.json", 4, "N=65536"), &cfg0).map_err(|e| e.to_string())?.best().family.clone();
    ensure(f0 == "fuse(RS-C-AG)", || format!("lambda 0 winner {f0}"))?;
    let mut cfg1 = TuneConfig::default();
    cfg1.comm.lambda = 200.0;
    let f1 = tune(&program("adam.json", 4, "N=1024"), &cfg1).map_err(|e| e.to_string())?.best().family.clone();
    ensure(f1 == "AR-C", || format!("large lambda winner {f1}"))?;
    Ok(format!("{}; lambda=0: {f0}; lambda=200 N=2^10: {f1}", families.join(", ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_fusedcomm");
    let g = |n: &str| golden(n).display().to_string();
    let s = |n: &str| root().join("schedules").join(n).display().to_string();
    let commands: Vec<Vec<String>> = vec![
        vec!["run".into(), g("pipeline.json"), "--schedule".into(), s("pipeline_overlap.json")],
        vec!["run".into(), g("adam.json"), "--schedule".into(), s("adam_fused.json"), "--size".into(), "N=4096".into()],
        vec!["tune".into(), g("model_parallel.json")],
        vec!["tune".into(), g("adam.json"), "--size".into(), "N=4096".into()],
    ];
    for (i, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for mode in ["threaded", "round-robin"] {
            for rep in 0..2 {
                let out = dir.path().join(format!("{i}-{mode}-{rep}.json"));
                let status = Command::new(bin)
                    .args(args)
                    .args(["--seed", "9", "--mode", mode, "--out"])
                    .arg(&out)
                    .output()
                    .map_err(|e| e.to_string())?;
                ensure(status.status.success(), || format!("{args:?} in {mode} failed"))?;
                outputs.push((mode, std::fs::read(&out).map_err(|e| e.to_string())?));
            }
        }
        ensure(outputs[0].1 == outputs[1].1, || format!("{args:?}: threaded reports differ"))?;
        ensure(outputs[2].1 == outputs[3].1, || format!("{args:?}: round-robin reports differ"))?;
        ensure(outputs[0].1 == outputs[2].1, || format!("{args:?}: modes disagree"))?;
    }
    Ok(format!("{} commands x 2 modes x 2 runs byte-identical", commands.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("semantics preservation", semantics_preservation),
        ("collective identities", collective_identities),
        ("schedule reproduction", schedule_reproduction),
        ("scattered tensors", scattered_tensors),
        ("overlap", overlap_suite),
        ("autotuner", autotuner_suite),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

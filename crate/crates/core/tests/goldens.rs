use std::path::PathBuf;

use fusedcomm::program::json::Bindings;
use fusedcomm::runtime::{CommConfig, ExecMode};
use fusedcomm::session::{load_program, load_schedule, Reference};
use fusedcomm::transform::Schedule;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bindings(name: &str, w: usize) -> Bindings {
    match name {
        "adam" => Bindings::new(w).with("N", 64),
        "pipeline" => Bindings::new(2 * w).with("B", 2).with("S", 4).with("H", 8),
        _ => Bindings::new(w).with("B", 2).with("S", 4).with("H", 8),
    }
}

fn cfg(w: usize) -> CommConfig {
    CommConfig { buffer_tile_elems: 16 * w, ..CommConfig::default() }
}

#[test]
fn golden_schedules_match_oracle() {
    let cases = [
        ("model_parallel", vec!["", "mp_split", "mp_reorder", "mp_fuse", "mp_overlap"]),
        ("adam", vec!["", "adam_fused"]),
        ("pipeline", vec!["", "pipeline_overlap"]),
    ];
    for w in [1, 2, 4] {
        for (golden, schedules) in &cases {
            let p = load_program(&root().join(format!("goldens/{golden}.json")), &bindings(golden, w)).unwrap();
            let r = Reference::new(&p, 7).unwrap();
            for s in schedules {
                let sched = if s.is_empty() { Schedule::default() } else { load_schedule(&root().join(format!("schedules/{s}.json"))).unwrap() };
                for mode in [ExecMode::Threaded, ExecMode::RoundRobin] {
                    let rep = r.run(&sched, &cfg(w), mode).unwrap_or_else(|e| panic!("{golden}/{s} w={w}: {e}"));
                    let dev = rep.deviation.unwrap();
                    assert!(dev <= 1e-5, "{golden}/{s} w={w}: deviation {dev}");
                }
            }
        }
    }
}

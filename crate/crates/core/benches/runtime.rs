use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fusedcomm::inputs::generate;
use fusedcomm::oracle::oracle_execute;
use fusedcomm::program::json::Bindings;
use fusedcomm::session::load_program;
use fusedcomm::tune::{tune, TuneConfig};

fn golden(name: &str, sizes: &str) -> fusedcomm::program::Program {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../goldens").join(name);
    let mut b = Bindings::new(4);
    b.parse_assignments(sizes).unwrap();
    load_program(&path, &b).unwrap()
}

/// Candidate evaluation on the rayon pool versus one candidate at a time.
fn tuning(c: &mut Criterion) {
    let programs = [
        ("adam", golden("adam.json", "N=65536")),
        ("model_parallel", golden("model_parallel.json", "B=2,S=8,H=64")),
        ("pipeline", golden("pipeline.json", "B=2,S=8,H=64")),
    ];
    let mut group = c.benchmark_group("tune");
    group.sample_size(10);
    for (name, p) in &programs {
        for parallel in [false, true] {
            if parallel && !cfg!(feature = "parallel") {
                continue;
            }
            let cfg = TuneConfig { parallel, ..TuneConfig::default() };
            let label = if parallel { "rayon" } else { "sequential" };
            group.bench_with_input(BenchmarkId::new(label, name), p, |b, p| b.iter(|| tune(p, &cfg).unwrap()));
        }
    }
    group.finish();
}

/// Reference interpreter; compare runs with and without `--no-default-features`.
fn oracle(c: &mut Criterion) {
    let p = golden("model_parallel.json", "B=8,S=64,H=256");
    let inputs = generate(&p, 0);
    let label = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new(label, "model_parallel"), |b| b.iter(|| oracle_execute(&p, &inputs, 0).unwrap()));
    group.finish();
}

criterion_group!(benches, tuning, oracle);
criterion_main!(benches);

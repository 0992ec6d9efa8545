use std::path::Path;

use proptest::prelude::*;

use fusedcomm::inputs::generate;
use fusedcomm::oracle::oracle_execute;
use fusedcomm::program::json::Bindings;
use fusedcomm::program::{broadcast_shapes, Reducer};
use fusedcomm::runtime::bucket::{build_bucket_table, scattered_collective, CollectiveKind};
use fusedcomm::runtime::{
    pipeline_time, ring_all_gather, ring_all_reduce, ring_reduce_scatter, CommConfig, ExecMode, Resource, Stage,
};
use fusedcomm::session::{load_program, load_schedule, Reference};
use fusedcomm::value::{Logical, Tensor};

fn root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn tensors(w: usize, n: usize, seed: u64) -> Vec<Tensor> {
    (0..w)
        .map(|r| {
            let data = (0..n).map(|i| (((i * 31 + r * 17) as u64 ^ seed) % 97) as f32 / 8.0 - 6.0).collect();
            Tensor::new(vec![n], data)
        })
        .collect()
}

fn stage() -> impl Strategy<Value = Stage> {
    (0..3usize, 0.0f64..50.0).prop_map(|(r, time)| {
        let resource = [Resource::Compute(0), Resource::Net(0), Resource::Link][r];
        Stage { resource, time }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reduce_scatter_then_all_gather_is_all_reduce(w in 1usize..6, per in 1usize..40, channels in 1usize..4, seed: u64) {
        let n = w * per;
        let cfg = CommConfig { channels, buffer_tile_elems: channels * w * 4, ..CommConfig::default() };
        let inputs = tensors(w, n, seed);
        let rs = ring_reduce_scatter(&cfg, &inputs, Reducer::Sum).unwrap();
        let ag = ring_all_gather(&cfg, &rs.outputs).unwrap();
        let ar = ring_all_reduce(&cfg, &inputs, Reducer::Sum).unwrap();
        // Inputs are multiples of 1/8 with small magnitude, so every order of summation is exact.
        let exact: Vec<f32> = (0..n).map(|i| inputs.iter().map(|t| t.data[i]).sum()).collect();
        for r in 0..w {
            prop_assert_eq!(&ag.outputs[r].data, &exact);
            prop_assert_eq!(&ar.outputs[r].data, &exact);
            let one_way = ((w - 1) * per * 4) as u64;
            prop_assert_eq!(rs.counters[r].comm_bytes, one_way);
            prop_assert_eq!(ag.counters[r].comm_bytes, one_way);
            prop_assert_eq!(ar.counters[r].comm_bytes, 2 * one_way);
        }
    }

    #[test]
    fn max_reducer_matches_elementwise_max(w in 2usize..5, per in 1usize..20, seed: u64) {
        let cfg = CommConfig { buffer_tile_elems: 2 * w * 8, ..CommConfig::default() };
        let inputs = tensors(w, w * per, seed);
        let ar = ring_all_reduce(&cfg, &inputs, Reducer::Max).unwrap();
        for i in 0..w * per {
            let m = inputs.iter().map(|t| t.data[i]).fold(f32::MIN, f32::max);
            prop_assert_eq!(ar.outputs[0].data[i], m);
        }
    }

    #[test]
    fn scattered_all_reduce_equals_member_collectives(w in 1usize..5, parts in prop::collection::vec(1usize..700, 1..5), seed: u64) {
        let sizes: Vec<usize> = parts.iter().map(|p| p * w).collect();
        let names: Vec<String> = (0..sizes.len()).map(|i| format!("t{i}")).collect();
        let table = build_bucket_table(&names.iter().map(String::as_str).zip(sizes.iter().copied()).collect::<Vec<_>>());
        let cfg = CommConfig { buffer_tile_elems: 2 * w * 64, ..CommConfig::default() };
        let inputs: Vec<Vec<Tensor>> = (0..w)
            .map(|r| sizes.iter().enumerate().map(|(m, &s)| tensors(w, s, seed ^ (m as u64 * 7919)).swap_remove(r)).collect())
            .collect();
        let out = scattered_collective(&cfg, &table, &inputs, CollectiveKind::AllReduce, Reducer::Sum, None).unwrap();
        prop_assert_eq!(out.run.report.kernel_steps, 1);
        for (m, _) in sizes.iter().enumerate() {
            let member: Vec<Tensor> = inputs.iter().map(|ts| ts[m].clone()).collect();
            let expected = ring_all_reduce(&cfg, &member, Reducer::Sum).unwrap();
            for r in 0..w {
                prop_assert_eq!(&out.tensors[r][m].data, &expected.outputs[r].data);
            }
        }
    }

    #[test]
    fn pipeline_time_is_bounded_and_monotone(stages in prop::collection::vec(stage(), 1..6), chunks in 1usize..32, which in 0usize..6, extra in 0.0f64..20.0) {
        let t = pipeline_time(&stages, chunks);
        let sum: f64 = stages.iter().map(|s| s.time).sum();
        let longest = stages.iter().map(|s| s.time).fold(0.0, f64::max);
        prop_assert!(t <= sum + 1e-9);
        prop_assert!(t + 1e-9 >= longest);
        let mut slower = stages.clone();
        let i = which % slower.len();
        slower[i].time += extra;
        prop_assert!(pipeline_time(&slower, chunks) + 1e-9 >= t);
    }

    #[test]
    fn balanced_two_stage_pipeline_hides_most_communication(t in 0.1f64..1000.0, chunks in 8usize..512) {
        let stages = [Stage { resource: Resource::Compute(0), time: t }, Stage { resource: Resource::Net(0), time: t }];
        let ratio = pipeline_time(&stages, chunks) / (2.0 * t);
        prop_assert!(ratio <= 0.6);
        prop_assert!((ratio - (chunks as f64 + 1.0) / (2.0 * chunks as f64)).abs() < 1e-9);
    }

    #[test]
    fn broadcast_shapes_commute_and_associate(a in prop::collection::vec(1usize..4, 0..4), b in prop::collection::vec(1usize..4, 0..4), c in prop::collection::vec(1usize..4, 0..4)) {
        prop_assert_eq!(broadcast_shapes(&a, &b), broadcast_shapes(&b, &a));
        let left = broadcast_shapes(&a, &b).and_then(|ab| broadcast_shapes(&ab, &c));
        let right = broadcast_shapes(&b, &c).and_then(|bc| broadcast_shapes(&a, &bc));
        if let (Some(l), Some(r)) = (&left, &right) {
            prop_assert_eq!(l, r);
        }
        prop_assert_eq!(left.is_some(), right.is_some());
    }

    #[test]
    fn blocks_concatenate_back(rows in 1usize..5, cols in 1usize..5, parts in 1usize..4, axis in 0usize..2) {
        let shape = if axis == 0 { vec![rows * parts, cols] } else { vec![rows, cols * parts] };
        let n = shape.iter().product();
        let t = Tensor::new(shape, (0..n).map(|i| i as f32).collect());
        let blocks: Vec<Tensor> = (0..parts).map(|i| t.block(axis, i, parts)).collect();
        prop_assert_eq!(Tensor::concat(&blocks, axis), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The oracle's Adam step equals a direct f64 evaluation of the same update.
    #[test]
    fn adam_oracle_matches_scalar_formula(w in 1usize..5, per in 1usize..16, seed in 0u64..1000) {
        let n = w * per;
        let b = Bindings::new(w).with("N", n);
        let p = load_program(&root().join("goldens/adam.json"), &b).unwrap();
        let inputs = generate(&p, seed);
        let res = oracle_execute(&p, &inputs, seed).unwrap();
        let scalar = |name: &str| match &inputs[name] {
            Logical::Global(t) => t.data[0] as f64,
            Logical::PerRank(_) => unreachable!(),
        };
        let global = |name: &str| match &inputs[name] {
            Logical::Global(t) => t.data.clone(),
            Logical::PerRank(_) => unreachable!(),
        };
        let grads = match &inputs["g"] {
            Logical::PerRank(ts) => ts.clone(),
            Logical::Global(_) => unreachable!(),
        };
        let (lr, b1, b2, t) = (scalar("lr"), scalar("beta1"), scalar("beta2"), scalar("t"));
        let (pv, mv, vv) = (global("p"), global("m"), global("v"));
        let out = match &res.outputs[0].1 {
            Logical::Global(x) => x.data.clone(),
            Logical::PerRank(xs) => xs[0].data.clone(),
        };
        for i in 0..n {
            let g: f64 = grads.iter().map(|x| x.data[i] as f64).sum();
            let m = mv[i] as f64 * b1 + (1.0 - b1) * g;
            let v = vv[i] as f64 * b2 + (1.0 - b1) * g * g;
            let m1 = m / (1.0 - b1.powf(t));
            let v1 = v / (1.0 - b2.powf(t));
            let expected = pv[i] as f64 - lr * m1 / v1.sqrt();
            let err = (out[i] as f64 - expected).abs() / expected.abs().max(1.0);
            prop_assert!(err < 1e-5, "element {}: {} vs {}", i, out[i], expected);
        }
    }

    #[test]
    fn execution_modes_agree(w in 1usize..5, seed in 0u64..1000) {
        let b = Bindings::new(w).with("B", 2).with("S", 4).with("H", 4 * w);
        let p = load_program(&root().join("goldens/model_parallel.json"), &b).unwrap();
        let s = load_schedule(&root().join("schedules/mp_overlap.json")).unwrap();
        let cfg = CommConfig { buffer_tile_elems: 4 * w, ..CommConfig::default() };
        let r = Reference::new(&p, seed).unwrap();
        let a = r.run(&s, &cfg, ExecMode::Threaded).unwrap();
        let c = r.run(&s, &cfg, ExecMode::RoundRobin).unwrap();
        prop_assert_eq!(&a.results, &c.results);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
        prop_assert!(a.deviation.unwrap() <= 1e-5);
    }
}

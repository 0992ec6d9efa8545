use std::path::Path;

use fusedcomm::program::json::{program_from_str, program_to_string, Bindings};
use fusedcomm::program::{canonical_form, has_errors, validate_program, Layout, Op, Program};
use fusedcomm::runtime::{CommConfig, ExecMode};
use fusedcomm::session::{load_program, load_schedule, run_schedule};
use fusedcomm::transform::{apply_directive, apply_schedule, Directive, Schedule, TransformError};

fn root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn mp(w: usize) -> Program {
    load_program(&root().join("goldens/model_parallel.json"), &Bindings::new(w).with("B", 2).with("S", 4).with("H", 8)).unwrap()
}

fn adam(w: usize, n: usize) -> Program {
    load_program(&root().join("goldens/adam.json"), &Bindings::new(w).with("N", n)).unwrap()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn split(target: &str, n: &[&str]) -> Directive {
    Directive::SplitArRsAg { target: target.into(), names: names(n) }
}

fn err(p: &Program, d: Directive) -> TransformError {
    apply_directive(p, &d).expect_err("directive should fail")
}

#[test]
fn split_creates_reduce_scatter_and_all_gather() {
    let p = mp(4);
    let a = apply_directive(&p, &split("sum", &["rs", "ag"])).unwrap();
    assert_eq!(a.created, ["rs", "ag"]);
    assert_eq!(a.removed, ["sum"]);
    let rs = a.program.node("rs").unwrap();
    assert!(matches!(rs.op, Op::ReduceScatter { .. }));
    assert_eq!(rs.info.layout, Layout::Sliced(2));
    assert_eq!(a.program.node("ag").unwrap().info.layout, Layout::Replicated);
    assert!(!has_errors(&validate_program(&a.program)));
}

#[test]
fn split_rejects_non_all_reduce_and_taken_names() {
    let p = mp(4);
    assert!(matches!(err(&p, split("layer", &[])), TransformError::NotAllReduce(_)));
    assert!(matches!(err(&p, split("ghost", &[])), TransformError::Unknown(_)));
    assert!(matches!(err(&p, split("sum", &["layer", "ag"])), TransformError::NameInUse(_)));
}

#[test]
fn reorder_rejects_non_consumers() {
    let p = apply_directive(&mp(4), &split("sum", &["rs", "ag"])).unwrap().program;
    let d = Directive::ReorderAllGather { ag: "ag".into(), comps: names(&["out"]), names: vec![] };
    assert!(matches!(err(&p, d), TransformError::NotAConsumer(_)));
    let d = Directive::ReorderAllGather { ag: "ag".into(), comps: names(&["layer"]), names: vec![] };
    assert!(matches!(err(&p, d), TransformError::NotSliceable(_)));
    let d = Directive::ReorderAllGather { ag: "layer".into(), comps: names(&["dropout"]), names: vec![] };
    assert!(matches!(err(&p, d), TransformError::WrongKind(_)));
}

#[test]
fn overlap_requires_a_producer_consumer_chain() {
    let p = mp(4);
    let d = Directive::Overlap { ids: names(&["layer", "dropout"]), name: None };
    assert!(matches!(err(&p, d), TransformError::NotProducerConsumerChain(_)));
}

#[test]
fn dead_refuses_live_nodes() {
    let p = mp(4);
    assert!(matches!(err(&p, Directive::Dead { id: "dropout".into() }), TransformError::StillLive(_)));
}

#[test]
fn as_slice_needs_sliced_consumers() {
    let p = adam(4, 64);
    assert!(matches!(err(&p, Directive::AsSlice { tensor: "m".into() }), TransformError::ConsumerNotSliced(_)));
}

#[test]
fn fuse_computation_merges_statements() {
    let p = adam(2, 16);
    let d = Directive::FuseComputation { ids: names(&["m_", "v_", "m1", "v1", "p_"]), name: Some("step".into()) };
    let a = apply_directive(&p, &d).unwrap();
    assert_eq!(a.created, ["step"]);
    match &a.program.node("step").unwrap().op {
        Op::Compute(k) => assert_eq!(k.stmts.len(), 5),
        other => panic!("unexpected {other:?}"),
    }
    let r = run_schedule(&p, &Schedule::new(vec![d]), &CommConfig { buffer_tile_elems: 4, ..CommConfig::default() }, 1, ExecMode::Threaded)
        .unwrap();
    assert!(r.deviation.unwrap() <= 1e-6);
}

#[test]
fn fuse_computation_rejects_communication() {
    let p = adam(2, 16);
    let d = Directive::FuseComputation { ids: names(&["avg", "m_"]), name: None };
    assert!(matches!(err(&p, d), TransformError::NotComputation(_)));
}

#[test]
fn empty_schedule_is_identity() {
    let p = mp(2);
    let t = apply_schedule(&p, &Schedule::default()).unwrap();
    assert!(t.provenance.is_empty());
    assert_eq!(canonical_form(&t.program), canonical_form(&p));
}

#[test]
fn schedule_error_names_the_directive() {
    let p = mp(2);
    let s = Schedule::new(vec![split("sum", &["rs", "ag"]), split("sum", &[])]);
    let e = apply_schedule(&p, &s).unwrap_err();
    assert_eq!(e.index, 1);
    assert!(matches!(e.error, TransformError::Unknown(_)));
}

#[test]
fn schedules_round_trip_through_json() {
    for f in ["mp_overlap.json", "adam_fused.json", "pipeline_overlap.json"] {
        let s = load_schedule(&root().join("schedules").join(f)).unwrap();
        let back = Schedule::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
    assert!(Schedule::from_str(r#"{"directives": [{"kind": "warp", "args": {}}]}"#).is_err());
}

#[test]
fn transformed_programs_round_trip_through_json() {
    let p = mp(4);
    let s = load_schedule(&root().join("schedules/mp_overlap.json")).unwrap();
    let t = apply_schedule(&p, &s).unwrap().program;
    let text = program_to_string(&t);
    let back = program_from_str(&text, &Bindings::new(4)).unwrap();
    assert_eq!(canonical_form(&back), canonical_form(&t));
    assert_eq!(program_to_string(&back), text);
}

#[test]
fn golden_schedule_holds_at_every_step() {
    let p = mp(4);
    let cfg = CommConfig { buffer_tile_elems: 16, ..CommConfig::default() };
    let full = load_schedule(&root().join("schedules/mp_overlap.json")).unwrap();
    for k in 0..=full.directives.len() {
        let s = Schedule::new(full.directives[..k].to_vec());
        let r = run_schedule(&p, &s, &cfg, 3, ExecMode::RoundRobin).unwrap();
        assert!(r.deviation.unwrap() <= 1e-5, "prefix {k}");
    }
}

#[test]
fn sliced_state_shrinks_per_rank_storage() {
    let (w, n) = (4, 256);
    let p = adam(w, n);
    let s = load_schedule(&root().join("schedules/adam_fused.json")).unwrap();
    let cfg = CommConfig { buffer_tile_elems: 32, ..CommConfig::default() };
    let base = run_schedule(&p, &Schedule::default(), &cfg, 0, ExecMode::Threaded).unwrap();
    let opt = run_schedule(&p, &s, &cfg, 0, ExecMode::Threaded).unwrap();
    assert_eq!(base.tensor_elems["m"], vec![n; w]);
    assert_eq!(opt.tensor_elems["m"], vec![n / w; w]);
    assert_eq!(opt.tensor_elems["v"], vec![n / w; w]);
    assert_eq!(opt.tensor_elems["p"], vec![n; w]);
    assert_eq!(opt.kernel_steps, 1);
    assert!(opt.memory_bytes[0] < base.memory_bytes[0]);
}

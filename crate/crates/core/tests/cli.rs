use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden(name: &str) -> String {
    root().join("goldens").join(name).display().to_string()
}

fn schedule(name: &str) -> String {
    root().join("schedules").join(name).display().to_string()
}

fn fusedcomm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusedcomm")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_lists_inferred_layouts() {
    let o = fusedcomm(&["check", &golden("model_parallel.json")]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let layout_of = |id: &str| {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(id)).unwrap();
        line.split_whitespace().nth(5).unwrap().to_string()
    };
    assert_eq!(layout_of("layer"), "Local");
    assert_eq!(layout_of("sum"), "Replicated");
    assert_eq!(layout_of("dropout"), "Replicated");
    assert_eq!(layout_of("out"), "Replicated");
}

#[test]
fn malformed_json_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"groups\": [").unwrap();
    assert_eq!(code(&fusedcomm(&["check", path.to_str().unwrap()])), 2);
    assert_eq!(code(&fusedcomm(&["check", "/nonexistent/program.json"])), 2);
    assert_eq!(code(&fusedcomm(&["frobnicate"])), 2);
    assert_eq!(code(&fusedcomm(&["check", &golden("adam.json"), "--ranks", "0"])), 2);
}

#[test]
fn invalid_layout_combination_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let program = r#"{
      "name": "bad", "groups": [{"id": 0, "size": "auto"}],
      "tensors": [
        {"name": "a", "elem": "F32", "shape": [8, 4], "layout": {"kind": "Sliced", "dim": 0}, "group": 0},
        {"name": "b", "elem": "F32", "shape": [8, 4], "layout": {"kind": "Sliced", "dim": 1}, "group": 0}
      ],
      "nodes": [{"id": "c", "kind": "pointwise", "inputs": [], "attrs": {"expr": "a + b"}}],
      "outputs": ["c"]
    }"#;
    std::fs::write(&path, program).unwrap();
    let o = fusedcomm(&["check", path.to_str().unwrap(), "--ranks", "2"]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("LayoutMismatch"));
}

#[test]
fn transform_reports_failing_directive_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(
        &path,
        r#"{"directives": [
            {"kind": "split_ar_rs_ag", "args": {"target": "sum"}},
            {"kind": "fuse_computation", "args": {"ids": ["nope"]}}
        ]}"#,
    )
    .unwrap();
    let o = fusedcomm(&["transform", &golden("model_parallel.json"), "--schedule", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("directive 1"));
}

#[test]
fn transform_to_overlapped_program() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = fusedcomm(&[
        "transform",
        &golden("model_parallel.json"),
        "--schedule",
        &schedule("mp_overlap.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let kinds: Vec<&str> = v["nodes"].as_array().unwrap().iter().map(|n| n["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["matmul", "fused_all_reduce", "overlap"]);
    assert_eq!(v["outputs"], serde_json::json!(["layerWithAR"]));

    let o = fusedcomm(&["check", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn diff_shows_reorder() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for (s, out) in [("mp_split.json", &a), ("mp_reorder.json", &b)] {
        let o = fusedcomm(&["transform", &golden("model_parallel.json"), "--schedule", &schedule(s), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let report = dir.path().join("d.json");
    let o = fusedcomm(&["diff", a.to_str().unwrap(), b.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let ids = |k: &str| -> Vec<String> { v[k].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap().to_string()).collect() };
    assert_eq!(ids("removed"), ["agSum", "dropout", "out"]);
    assert_eq!(ids("added"), ["scD", "scOut", "agOut"]);

    let o = fusedcomm(&["diff", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).trim().is_empty());
}

#[test]
fn run_reports_deviation_and_kernel_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = fusedcomm(&[
        "run",
        &golden("adam.json"),
        "--schedule",
        &schedule("adam_fused.json"),
        "--size",
        "N=65536",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["deviation"].as_f64().unwrap() <= 1e-5);
    assert_eq!(v["kernel_steps"], 1);
    assert_eq!(v["ranks"], 4);
}

#[test]
fn run_fails_when_tolerance_is_negative() {
    let o = fusedcomm(&["run", &golden("model_parallel.json"), "--schedule", &schedule("mp_split.json"), "--tol=-1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn single_rank_run_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = fusedcomm(&["run", &golden("adam.json"), "--ranks", "1", "--tol", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["deviation"].as_f64().unwrap(), 0.0);
    assert_eq!(v["comm_bytes"], serde_json::json!([0]));
}

#[test]
fn run_reads_and_dumps_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump");
    let o = fusedcomm(&["run", &golden("adam.json"), "--size", "N=64", "--dump", dump.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let (meta, t) = fusedcomm::runtime::tensor_io::read_tensor(&dump.join("p_.bin")).unwrap();
    assert_eq!(meta.shape, vec![64]);
    assert_eq!(t.data.len(), 64);

    // Feeding the dumped parameters back as `p` changes the output.
    let inputs = dir.path().join("in");
    std::fs::create_dir(&inputs).unwrap();
    fusedcomm::runtime::tensor_io::write_tensor(&inputs.join("p.bin"), "p", meta.elem, &t).unwrap();
    let again = dir.path().join("again");
    let o = fusedcomm(&[
        "run",
        &golden("adam.json"),
        "--size",
        "N=64",
        "--inputs",
        inputs.to_str().unwrap(),
        "--dump",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let (_, t2) = fusedcomm::runtime::tensor_io::read_tensor(&again.join("p_.bin")).unwrap();
    assert_ne!(t2, t);
}

#[test]
fn tune_single_schedule_program_picks_index_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let program = r#"{
      "name": "scale", "groups": [{"id": 0, "size": "auto"}],
      "tensors": [{"name": "a", "elem": "F32", "shape": [16], "layout": {"kind": "Replicated"}, "group": 0}],
      "nodes": [{"id": "c", "kind": "pointwise", "inputs": [], "attrs": {"expr": "a * 2"}}],
      "outputs": ["c"]
    }"#;
    std::fs::write(&path, program).unwrap();
    let out = dir.path().join("t.json");
    let o = fusedcomm(&["tune", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["winner"], 0);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 1);
}

#[test]
fn tune_model_parallel_default_winner() {
    let o = fusedcomm(&["tune", &golden("model_parallel.json")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().last().unwrap().ends_with("ol(MM,fuse(RS-C-AG))"), "{}", stdout(&o));
}

#[test]
fn tune_size_sweep_shows_crossover() {
    let o = fusedcomm(&["tune", &golden("adam.json"), "--sweep", "N=10..20", "--lambda", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let winners: Vec<String> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(2).unwrap().to_string())
        .collect();
    assert_eq!(winners.len(), 11);
    assert_eq!(winners.first().unwrap(), "AR-C");
    assert_eq!(winners.last().unwrap(), "fuse(RS-C-AG)");
}

#[test]
fn oracle_prints_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.json");
    let o = fusedcomm(&["oracle", &golden("pipeline.json"), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["outputs"][0]["name"], "recv");
    assert_eq!(v["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn run_and_tune_reports_are_byte_identical_across_repeats_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for mode in ["threaded", "round-robin"] {
        for rep in 0..2 {
            let out = dir.path().join(format!("run-{mode}-{rep}.json"));
            let o = fusedcomm(&[
                "run",
                &golden("pipeline.json"),
                "--schedule",
                &schedule("pipeline_overlap.json"),
                "--seed",
                "7",
                "--mode",
                mode,
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code(&o), 0);
            reports.push(std::fs::read(&out).unwrap());
        }
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

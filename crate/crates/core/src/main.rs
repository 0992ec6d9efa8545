use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use fusedcomm::inputs::generate;
use fusedcomm::oracle::oracle_execute;
use fusedcomm::program::json::{program_to_string, Bindings};
use fusedcomm::program::{has_errors, node_signatures, topo_order, validate_program, Program, Severity};
use fusedcomm::runtime::tensor_io::{read_tensor, write_tensor};
use fusedcomm::runtime::{CommConfig, ExecMode, Protocol, RunReport};
use fusedcomm::session::{load_program, load_schedule, Reference, SessionError};
use fusedcomm::transform::{apply_schedule, Schedule};
use fusedcomm::tune::{tune, Metric, TuneConfig, TuneError, TuneReport};
use fusedcomm::value::{Logical, Tensor};

#[derive(Parser)]
#[command(name = "fusedcomm", version, about = "Transform, tune and simulate distributed tensor programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a program and list inferred shapes and layouts.
    Check(Common),
    /// Apply a schedule and print the resulting program.
    Transform(Common),
    /// Execute a program (optionally scheduled) and compare with the oracle.
    Run(RunArgs),
    /// Enumerate and evaluate schedules, reporting the fastest.
    Tune(TuneArgs),
    /// Evaluate a program with the sequential reference interpreter.
    Oracle(Common),
    /// Structural difference between two programs.
    Diff(DiffArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Ll,
    Simple,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Threaded,
    RoundRobin,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Sim,
    Wall,
}

#[derive(Args, Clone)]
struct Common {
    program: PathBuf,
    /// Total number of ranks.
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Size assignments such as `B=2,S=8,H=64` or `N=65536`.
    #[arg(long)]
    size: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[command(flatten)]
    comm: CommArgs,
}

#[derive(Args, Clone)]
struct CommArgs {
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Simple)]
    protocol: ProtocolArg,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1000.0)]
    beta: f64,
    #[arg(long, default_value_t = 2000.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Elements per buffer tile.
    #[arg(long, default_value_t = 1 << 16)]
    tile: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Threaded)]
    mode: ModeArg,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of input tensor files (`<name>.bin`, `<name>.r<k>.bin` for local tensors).
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Directory to write output tensor files into.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    /// Additional rank counts to sweep, comma separated.
    #[arg(long)]
    ranks_sweep: Option<String>,
    /// Power-of-two sweep of one size symbol, e.g. `N=10..20`.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, value_enum, default_value_t = MetricArg::Sim)]
    metric: MetricArg,
    #[arg(long, default_value_t = 16)]
    fusion_threshold: usize,
    /// Evaluate candidates one at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Command failure with its exit code: 1 for semantic, 2 for usage or parse.
struct Fail(u8, String);

type Res<T> = Result<T, Fail>;

fn usage(msg: impl Into<String>) -> Fail {
    Fail(2, msg.into())
}

fn semantic(msg: impl Into<String>) -> Fail {
    Fail(1, msg.into())
}

impl From<SessionError> for Fail {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Io { .. } | SessionError::Parse(_) => usage(e.to_string()),
            _ => semantic(e.to_string()),
        }
    }
}

impl From<TuneError> for Fail {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Session(s) => s.into(),
            TuneError::Config(_) => usage(e.to_string()),
            TuneError::CandidateFailed { .. } => semantic(e.to_string()),
        }
    }
}

fn bindings(ranks: usize, size: Option<&str>) -> Res<Bindings> {
    if ranks == 0 {
        return Err(usage("--ranks must be at least 1"));
    }
    let mut b = Bindings::new(ranks).with("B", 2).with("S", 8).with("H", 64).with("N", 1 << 16);
    if let Some(s) = size {
        b.parse_assignments(s).map_err(usage)?;
    }
    Ok(b)
}

impl CommArgs {
    fn config(&self) -> CommConfig {
        CommConfig {
            channels: self.channels,
            buffer_tile_elems: self.tile,
            protocol: match self.protocol {
                ProtocolArg::Ll => Protocol::LowLatency,
                ProtocolArg::Simple => Protocol::Simple,
            },
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }

    fn mode(&self) -> ExecMode {
        match self.mode {
            ModeArg::Threaded => ExecMode::Threaded,
            ModeArg::RoundRobin => ExecMode::RoundRobin,
        }
    }
}

impl Common {
    fn load(&self) -> Res<Program> {
        Ok(load_program(&self.program, &bindings(self.ranks, self.size.as_deref())?)?)
    }

    fn schedule(&self) -> Res<Schedule> {
        match &self.schedule {
            Some(path) => Ok(load_schedule(path)?),
            None => Ok(Schedule::default()),
        }
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn write_out(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn ensure_valid(p: &Program) -> Res<()> {
    let diags = validate_program(p);
    for d in &diags {
        eprintln!("{d}");
    }
    if has_errors(&diags) {
        return Err(semantic(format!("{} is invalid", p.name)));
    }
    Ok(())
}

fn cmd_check(c: &Common) -> Res<()> {
    let p = c.load()?;
    let diags = validate_program(&p);
    println!("program {} on {} ranks", p.name, p.world_size());
    for g in &p.groups {
        println!("  group {}: ranks {}..{}", g.id, g.first_rank, g.first_rank + g.size);
    }
    for t in &p.tensors {
        println!("  tensor {:<10} {:?} {:?} {} group {}", t.name, t.elem, t.shape, t.layout, t.group);
    }
    let mut nodes = Vec::new();
    for id in topo_order(&p) {
        let n = p.node(&id).expect("ordered");
        println!("  {:<16} {:<18} {:?} {} group {}", id, n.op.kind_name(), n.info.shape, n.info.layout, n.info.group);
        nodes.push(json!({"id": id, "kind": n.op.kind_name(), "shape": n.info.shape,
                          "layout": n.info.layout.to_string(), "group": n.info.group}));
    }
    for d in &diags {
        println!("{d}");
    }
    if let Some(out) = &c.out {
        let ds: Vec<String> = diags.iter().map(ToString::to_string).collect();
        write_out(out, &pretty(&json!({"program": p.name, "nodes": nodes, "diagnostics": ds})))?;
    }
    if has_errors(&diags) {
        return Err(semantic(format!("{} error(s)", diags.iter().filter(|d| d.severity == Severity::Error).count())));
    }
    Ok(())
}

fn cmd_transform(c: &Common) -> Res<()> {
    if c.schedule.is_none() {
        return Err(usage("transform needs --schedule"));
    }
    let p = c.load()?;
    ensure_valid(&p)?;
    let t = apply_schedule(&p, &c.schedule()?).map_err(|e| semantic(e.to_string()))?;
    let text = program_to_string(&t.program) + "\n";
    match &c.out {
        Some(out) => {
            write_out(out, &text)?;
            for e in &t.provenance {
                println!("[{}] {}: -{:?} +{:?}", e.index, e.directive, e.removed, e.created);
            }
        }
        None => {
            print!("{text}");
            for e in &t.provenance {
                eprintln!("[{}] {}: -{:?} +{:?}", e.index, e.directive, e.removed, e.created);
            }
        }
    }
    Ok(())
}

fn read_inputs(p: &Program, dir: &Path, seed: u64) -> Res<fusedcomm::inputs::LogicalInputs> {
    let mut inputs = generate(p, seed);
    for d in &p.tensors {
        let read = |file: String| -> Res<Option<Tensor>> {
            let path = dir.join(file);
            if !path.exists() {
                return Ok(None);
            }
            let (_, t) = read_tensor(&path).map_err(|e| usage(e.to_string()))?;
            if t.shape != d.shape {
                return Err(usage(format!("{}: shape {:?}, declared {:?}", path.display(), t.shape, d.shape)));
            }
            Ok(Some(t))
        };
        match inputs.get_mut(&d.name) {
            Some(Logical::Global(g)) => {
                if let Some(t) = read(format!("{}.bin", d.name))? {
                    *g = t;
                }
            }
            Some(Logical::PerRank(ts)) => {
                for (r, slot) in ts.iter_mut().enumerate() {
                    if let Some(t) = read(format!("{}.r{r}.bin", d.name))? {
                        *slot = t;
                    }
                }
            }
            None => {}
        }
    }
    Ok(inputs)
}

fn dump_logical(dir: &Path, name: &str, elem: fusedcomm::program::ElemType, v: &Logical) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let io = |e: std::io::Error| usage(e.to_string());
    match v {
        Logical::Global(t) => write_tensor(&dir.join(format!("{name}.bin")), name, elem, t).map_err(io),
        Logical::PerRank(ts) => {
            for (r, t) in ts.iter().enumerate() {
                write_tensor(&dir.join(format!("{name}.r{r}.bin")), name, elem, t).map_err(io)?;
            }
            Ok(())
        }
    }
}

fn report_table(r: &RunReport) {
    println!("program        {}", r.program);
    println!("ranks          {}", r.ranks);
    let plan: Vec<String> = r.plan.iter().map(|s| s.id.clone()).collect();
    println!("plan           {}", plan.join(" -> "));
    println!("kernel steps   {}", r.kernel_steps);
    println!("simulated time {:.3} us", r.simulated_time);
    println!("wall time      {:.3} ms", r.wall_time * 1e3);
    println!("{:>6} {:>14} {:>14} {:>14}", "rank", "comm bytes", "p2p bytes", "memory bytes");
    for k in 0..r.ranks {
        println!("{k:>6} {:>14} {:>14} {:>14}", r.comm_bytes[k], r.p2p_bytes[k], r.memory_bytes[k]);
    }
    for o in &r.outputs {
        println!("output {} {:?} {} sha256 {}", o.name, o.shape, o.layout, &o.sha256[..16]);
    }
    if let Some(d) = r.deviation {
        println!("deviation      {d:e}");
    }
}

fn cmd_run(a: &RunArgs) -> Res<()> {
    let c = &a.common;
    let p = c.load()?;
    ensure_valid(&p)?;
    let cfg = c.comm.config();
    let inputs = match &a.inputs {
        Some(dir) => read_inputs(&p, dir, c.seed)?,
        None => generate(&p, c.seed),
    };
    let reference = Reference::with_inputs(&p, c.seed, inputs)?;
    let report = reference.run(&c.schedule()?, &cfg, c.comm.mode())?;
    report_table(&report);
    if let Some(out) = &c.out {
        write_out(out, &pretty(&report))?;
    }
    if let Some(dir) = &a.dump {
        for (name, v) in &report.results.outputs {
            let elem = p.node(name).map_or(fusedcomm::program::ElemType::F32, |n| n.info.elem);
            dump_logical(dir, name, elem, v)?;
        }
    }
    let dev = report.deviation.unwrap_or(f64::INFINITY);
    if !(dev <= c.tol) {
        return Err(semantic(format!("deviation {dev:e} exceeds tolerance {:e}", c.tol)));
    }
    Ok(())
}

fn tune_table(r: &TuneReport) {
    println!("{:>4} {:>14} {:>6} {:>12}  {:<28} schedule", "#", "time (us)", "steps", "deviation", "family");
    for (i, c) in r.candidates.iter().enumerate() {
        let mark = if i == r.winner { '*' } else { ' ' };
        println!("{mark}{i:>3} {:>14.3} {:>6} {:>12.3e}  {:<28} {}", c.metric(r.metric), c.kernel_steps, c.deviation, c.family, c.label);
    }
    println!("winner {} {}", r.winner, r.best().family);
}

fn parse_sweep(s: &str) -> Res<(String, Vec<usize>)> {
    let err = || usage(format!("--sweep expects NAME=LO..HI (powers of two), got {s}"));
    let (name, range) = s.split_once('=').ok_or_else(err)?;
    let (lo, hi) = range.split_once("..").ok_or_else(err)?;
    let lo: u32 = lo.trim().parse().map_err(|_| err())?;
    let hi: u32 = hi.trim().parse().map_err(|_| err())?;
    if lo > hi || hi > 40 {
        return Err(err());
    }
    Ok((name.trim().to_string(), (lo..=hi).map(|e| 1usize << e).collect()))
}

fn cmd_tune(a: &TuneArgs) -> Res<()> {
    let c = &a.common;
    let mut worlds = vec![c.ranks];
    if let Some(list) = &a.ranks_sweep {
        for w in list.split(',').filter(|s| !s.trim().is_empty()) {
            worlds.push(w.trim().parse().map_err(|_| usage(format!("bad rank count {w}")))?);
        }
    }
    let mut sizes: Vec<Option<String>> = vec![c.size.clone()];
    if let Some(s) = &a.sweep {
        let (name, values) = parse_sweep(s)?;
        sizes = values
            .into_iter()
            .map(|v| Some(format!("{}{name}={v}", c.size.as_ref().map_or(String::new(), |s| format!("{s},")))))
            .collect();
    }
    let cfg = TuneConfig {
        fusion_threshold: a.fusion_threshold,
        world_sizes: worlds.clone(),
        tensor_sizes: sizes.iter().flatten().cloned().collect(),
        metric: match a.metric {
            MetricArg::Sim => Metric::SimulatedClock,
            MetricArg::Wall => Metric::WallClock,
        },
        seed: c.seed,
        comm: c.comm.config(),
        tol: c.tol,
        mode: c.comm.mode(),
        parallel: !a.sequential,
    };
    let mut entries: Vec<(usize, Option<String>, TuneReport)> = Vec::new();
    for &w in &worlds {
        for s in &sizes {
            let p = load_program(&c.program, &bindings(w, s.as_deref())?)?;
            ensure_valid(&p)?;
            entries.push((w, s.clone(), tune(&p, &cfg)?));
        }
    }
    let text = if let [(_, _, r)] = entries.as_slice() {
        tune_table(r);
        pretty(r)
    } else {
        println!("{:>6} {:<24} {:<28} {:>14}", "ranks", "sizes", "winner", "time (us)");
        let mut list: Vec<Value> = Vec::new();
        for (w, s, r) in &entries {
            let size = s.clone().unwrap_or_default();
            println!("{w:>6} {size:<24} {:<28} {:>14.3}", r.best().family, r.best().metric(r.metric));
            list.push(json!({"ranks": w, "sizes": size, "report": r}));
        }
        pretty(&list)
    };
    if let Some(out) = &c.out {
        write_out(out, &text)?;
    }
    Ok(())
}

fn digest(v: &Logical) -> String {
    Sha256::digest(v.bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_oracle(c: &Common) -> Res<()> {
    let p = c.load()?;
    ensure_valid(&p)?;
    let inputs = generate(&p, c.seed);
    let r = oracle_execute(&p, &inputs, c.seed).map_err(|e| semantic(e.to_string()))?;
    let entry = |(name, v): &(String, Logical)| {
        let head: Vec<f32> = v.tensors()[0].data.iter().take(4).copied().collect();
        println!("{name:<12} sha256 {} first {head:?}", &digest(v)[..16]);
        json!({"name": name, "sha256": digest(v), "ranks": v.tensors().len()})
    };
    let outputs: Vec<Value> = r.outputs.iter().map(entry).collect();
    let state: Vec<Value> = r.state.iter().map(entry).collect();
    if let Some(out) = &c.out {
        write_out(out, &pretty(&json!({"program": p.name, "outputs": outputs, "state": state})))?;
    }
    Ok(())
}

fn cmd_diff(a: &DiffArgs) -> Res<()> {
    let b = bindings(a.ranks, a.size.as_deref())?;
    let pa = load_program(&a.a, &b)?;
    let pb = load_program(&a.b, &b)?;
    let (sa, sb) = (node_signatures(&pa), node_signatures(&pb));
    let mut pool: BTreeMap<u64, usize> = BTreeMap::new();
    for s in sb.values() {
        *pool.entry(*s).or_default() += 1;
    }
    let mut removed = Vec::new();
    for id in topo_order(&pa) {
        match pool.get_mut(&sa[&id]) {
            Some(k) if *k > 0 => *k -= 1,
            _ => removed.push(id),
        }
    }
    let mut pool: BTreeMap<u64, usize> = BTreeMap::new();
    for s in sa.values() {
        *pool.entry(*s).or_default() += 1;
    }
    let mut added = Vec::new();
    for id in topo_order(&pb) {
        match pool.get_mut(&sb[&id]) {
            Some(k) if *k > 0 => *k -= 1,
            _ => added.push(id),
        }
    }
    let mut tensors = Vec::new();
    for t in &pa.tensors {
        match pb.tensor(&t.name) {
            Some(u) if u.layout != t.layout || u.shape != t.shape => {
                println!("~ tensor {}: {} {:?} -> {} {:?}", t.name, t.layout, t.shape, u.layout, u.shape);
                tensors.push(json!({"name": t.name, "from": t.layout.to_string(), "to": u.layout.to_string()}));
            }
            None => {
                println!("- tensor {}", t.name);
                tensors.push(json!({"name": t.name, "from": t.layout.to_string(), "to": null}));
            }
            _ => {}
        }
    }
    let kind = |p: &Program, id: &str| p.node(id).map_or("?", |n| n.op.kind_name());
    for id in &removed {
        println!("- {id} ({})", kind(&pa, id));
    }
    for id in &added {
        println!("+ {id} ({})", kind(&pb, id));
    }
    if let Some(out) = &a.out {
        let r: Vec<Value> = removed.iter().map(|id| json!({"id": id, "kind": kind(&pa, id)})).collect();
        let d: Vec<Value> = added.iter().map(|id| json!({"id": id, "kind": kind(&pb, id)})).collect();
        write_out(out, &pretty(&json!({"removed": r, "added": d, "tensors": tensors})))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Check(c) => cmd_check(c),
        Cmd::Transform(c) => cmd_transform(c),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Tune(a) => cmd_tune(a),
        Cmd::Oracle(c) => cmd_oracle(c),
        Cmd::Diff(a) => cmd_diff(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

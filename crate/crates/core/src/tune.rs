//! Schedule search: a pointwise-fusion pre-pass, then breadth-first
//! enumeration of directive applications, deduplicated by DFG isomorphism.
//! Every candidate is executed and checked against the oracle.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::program::{canonical_form, topo_order, Op, Program, Source};
use crate::runtime::{plan, CommConfig, ExecMode, RunReport};
use crate::session::{Reference, SessionError};
use crate::transform::{apply_directive, apply_schedule, Directive, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SimulatedClock,
    WallClock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    /// Largest number of pointwise nodes fused by the pre-pass.
    pub fusion_threshold: usize,
    /// Rank counts swept by the command line.
    pub world_sizes: Vec<usize>,
    /// Size assignments (`N=1024`, `B=2,S=8,H=64`) swept by the command line.
    pub tensor_sizes: Vec<String>,
    pub metric: Metric,
    pub seed: u64,
    pub comm: CommConfig,
    pub tol: f64,
    pub mode: ExecMode,
    /// Evaluate candidates on the rayon pool (requires the `parallel` feature).
    pub parallel: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            fusion_threshold: 16,
            world_sizes: vec![4],
            tensor_sizes: Vec::new(),
            metric: Metric::SimulatedClock,
            seed: 0,
            comm: CommConfig::default(),
            tol: 1e-5,
            mode: ExecMode::Threaded,
            parallel: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("candidate {schedule} failed: {diagnostic}")]
    CandidateFailed { schedule: String, diagnostic: String },
    #[error("invalid tuning configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub schedule: Value,
    pub label: String,
    pub family: String,
    pub simulated_time: f64,
    #[serde(skip)]
    pub wall_time: f64,
    pub comm_bytes: Vec<u64>,
    pub p2p_bytes: Vec<u64>,
    pub memory_bytes: Vec<u64>,
    pub kernel_steps: usize,
    pub deviation: f64,
    #[serde(skip)]
    pub directives: Schedule,
}

impl Candidate {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::SimulatedClock => self.simulated_time,
            Metric::WallClock => self.wall_time,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneReport {
    pub program: String,
    pub ranks: usize,
    pub metric: Metric,
    pub candidates: Vec<Candidate>,
    pub winner: usize,
}

impl TuneReport {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.winner]
    }
}

/// Candidate order: metric (values within a relative 1e-9 tie), then fewer
/// kernel steps, then the smaller schedule key.
pub fn compare(a: &Candidate, b: &Candidate, m: Metric) -> Ordering {
    let (x, y) = (a.metric(m), b.metric(m));
    let tie = (x - y).abs() <= 1e-9 * x.abs().max(y.abs());
    let by_metric = if tie { Ordering::Equal } else { x.total_cmp(&y) };
    by_metric.then(a.kernel_steps.cmp(&b.kernel_steps)).then_with(|| a.directives.key().cmp(&b.directives.key()))
}

/// Short structural name of a program's plan, e.g. `ol(MM,fuse(RS-C-AG))`.
pub fn family(p: &Program) -> String {
    fn token(p: &Program, id: &str) -> Option<String> {
        let n = p.node(id)?;
        Some(match &n.op {
            Op::MatMul { .. } => "MM".into(),
            Op::Compute(_) => "C".into(),
            Op::AllReduce { .. } => "AR".into(),
            Op::ReduceScatter { .. } => "RS".into(),
            Op::AllGather { .. } => "AG".into(),
            Op::Reduce { .. } => "R".into(),
            Op::Broadcast { .. } => "BC".into(),
            Op::Send { payload, .. } if payload.is_identity() => "P2P".into(),
            Op::Send { .. } => "fuse(C-P2P)".into(),
            Op::Recv { .. } => return None,
            Op::FusedAllReduce { kernel, .. } if kernel.is_identity() => "fuse(RS-AG)".into(),
            Op::FusedAllReduce { .. } => "fuse(RS-C-AG)".into(),
            Op::Overlap { members } => {
                let inner: Vec<String> = members.iter().filter_map(|m| token(p, m)).collect();
                format!("ol({})", inner.join(","))
            }
        })
    }
    let parts: Vec<String> = plan(p).steps.iter().filter_map(|s| token(p, &s.id)).collect();
    if parts.is_empty() {
        "<empty>".into()
    } else {
        parts.join("-")
    }
}

/// Fuses connected pointwise computations, at most `threshold` per kernel.
/// Returns the directives applied and the resulting program.
pub fn fusion_prepass(p: &Program, threshold: usize) -> (Vec<Directive>, Program) {
    let order = topo_order(p);
    let compute: BTreeSet<&str> = p
        .nodes
        .iter()
        .filter(|n| n.op.is_compute() && p.group_of_member(&n.id).is_none())
        .map(|n| n.id.as_str())
        .collect();
    let mut parent: BTreeMap<&str, &str> = compute.iter().map(|&c| (c, c)).collect();
    fn root<'a>(parent: &BTreeMap<&'a str, &'a str>, mut x: &'a str) -> &'a str {
        while parent[x] != x {
            x = parent[x];
        }
        x
    }
    for &c in &compute {
        let n = p.node(c).expect("listed");
        for d in n.op.node_deps() {
            if let Some(&d) = compute.get(d.as_str()) {
                let same_group = p.node(d).map(|x| x.info.group) == Some(n.info.group);
                let (a, b) = (root(&parent, c), root(&parent, d));
                if same_group && a != b {
                    parent.insert(a.max(b), a.min(b));
                }
            }
        }
    }
    let mut components: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for id in &order {
        if compute.contains(id.as_str()) {
            components.entry(root(&parent, id)).or_default().push(id.clone());
        }
    }
    let mut pieces: Vec<Vec<String>> = Vec::new();
    for ids in components.into_values() {
        pieces.extend(ids.chunks(threshold.max(1)).filter(|c| c.len() > 1).map(<[String]>::to_vec));
    }
    pieces.sort_by_key(|ids| order.iter().position(|o| o == &ids[0]));
    let mut q = p.clone();
    let mut applied = Vec::new();
    for ids in pieces {
        let d = Directive::FuseComputation { ids, name: None };
        if let Ok(a) = apply_directive(&q, &d) {
            q = a.program;
            applied.push(d);
        }
    }
    (applied, q)
}

fn input_node(op: &Op) -> Option<&str> {
    let o = match op {
        Op::AllReduce { input, .. }
        | Op::ReduceScatter { input, .. }
        | Op::AllGather { input, .. }
        | Op::Reduce { input, .. }
        | Op::Broadcast { input, .. }
        | Op::Recv { input, .. }
        | Op::FusedAllReduce { input, .. } => input,
        _ => return None,
    };
    match &o.source {
        Source::Node(n) | Source::Written { node: n, .. } => Some(n),
        Source::Tensor(_) => None,
    }
}

/// Compute and send nodes downstream of `from` through compute nodes only.
fn downstream_comps(p: &Program, from: &str, allow_send: bool) -> Vec<String> {
    let mut found: BTreeSet<String> = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(x) = stack.pop() {
        for c in p.consumers(&x) {
            let Some(n) = p.node(&c) else { continue };
            let ok = n.op.is_compute() || (allow_send && matches!(n.op, Op::Send { .. }));
            if ok && p.group_of_member(&c).is_none() && found.insert(c.clone()) && n.op.is_compute() {
                stack.push(c);
            }
        }
    }
    topo_order(p).into_iter().filter(|id| found.contains(id)).collect()
}

/// Compute nodes between `rs` and the input of `ag`, or `None` when the
/// gather is not fed from `rs` through computations alone.
fn between(p: &Program, rs: &str, ag: &str) -> Option<Vec<String>> {
    let start = input_node(&p.node(ag)?.op)?;
    if start == rs {
        return Some(Vec::new());
    }
    let mut set = BTreeSet::new();
    let mut stack = vec![start.to_string()];
    let mut reached = false;
    while let Some(x) = stack.pop() {
        if x == rs {
            reached = true;
            continue;
        }
        let n = p.node(&x)?;
        if !n.op.is_compute() {
            return None;
        }
        if set.insert(x.clone()) {
            stack.extend(n.op.node_deps());
        }
    }
    reached.then(|| topo_order(p).into_iter().filter(|id| set.contains(id)).collect())
}

fn single_consumer(p: &Program, id: &str) -> Option<String> {
    match p.consumers(id).as_slice() {
        [one] => Some(one.clone()),
        _ => None,
    }
}

/// Maximal chain of communication nodes starting at `head`, looking through
/// the receive of every send.
fn comm_chain(p: &Program, head: &str) -> Vec<String> {
    let mut chain = vec![head.to_string()];
    let mut cur = head.to_string();
    loop {
        let Some(n) = p.node(&cur) else { break };
        let mut next = single_consumer(p, &cur);
        if matches!(n.op, Op::Send { .. }) {
            next = next.filter(|r| p.node(r).is_some_and(|x| matches!(x.op, Op::Recv { .. }))).and_then(|r| single_consumer(p, &r));
        }
        let Some(next) = next else { break };
        let ok = p.node(&next).is_some_and(|x| x.op.is_communication() && !matches!(x.op, Op::Recv { .. }));
        if !ok || chain.contains(&next) {
            break;
        }
        chain.push(next.clone());
        cur = next;
    }
    chain
}

/// Directive groups applicable to `p`, in a fixed order. Each group is
/// applied as one search step.
pub fn candidate_moves(p: &Program) -> Vec<Vec<Directive>> {
    let mut moves = Vec::new();
    let order = topo_order(p);
    let free = |id: &str| p.group_of_member(id).is_none();
    for id in order.iter().filter(|id| free(id)) {
        let n = p.node(id).expect("ordered");
        match &n.op {
            Op::AllReduce { .. } => moves.push(vec![Directive::SplitArRsAg { target: id.clone(), names: Vec::new() }]),
            Op::AllGather { restores: None, .. } => {
                let comps = downstream_comps(p, id, true);
                if !comps.is_empty() {
                    moves.push(vec![Directive::ReorderAllGather { ag: id.clone(), comps, names: Vec::new() }]);
                }
            }
            Op::Broadcast { restores: None, .. } => {
                let comps = downstream_comps(p, id, false);
                if !comps.is_empty() {
                    moves.push(vec![Directive::ReorderBroadcast { bc: id.clone(), comps, names: Vec::new() }]);
                }
            }
            Op::Send { payload, .. } if payload.is_identity() => {
                if let Some(Source::Node(c)) = payload.operands().first().map(|o| &o.source) {
                    if p.node(c).is_some_and(|x| x.op.is_compute()) && free(c) {
                        moves.push(vec![Directive::FuseSend { comp: c.clone(), send: id.clone(), name: None }]);
                    }
                }
            }
            _ => {}
        }
    }

    let mut slice = Vec::new();
    let mut dead = Vec::new();
    for t in p.tensors.iter().filter(|t| t.layout == crate::program::Layout::Replicated) {
        let restorers: Vec<&str> = order
            .iter()
            .filter(|id| {
                p.node(id).is_some_and(|n| matches!(&n.op, Op::AllGather { restores: Some(r), .. } if r == &t.name))
                    && p.consumers(id).is_empty()
                    && !p.is_output(id)
                    && free(id)
            })
            .map(String::as_str)
            .collect();
        if !restorers.is_empty() {
            slice.push(Directive::AsSlice { tensor: t.name.clone() });
            dead.extend(restorers.into_iter().map(|id| Directive::Dead { id: id.to_string() }));
        }
    }
    if !slice.is_empty() {
        slice.extend(dead);
        moves.push(slice);
    }

    for rs in order.iter().filter(|id| free(id) && p.node(id).is_some_and(|n| matches!(n.op, Op::ReduceScatter { .. }))) {
        for ag in order.iter().filter(|id| free(id) && p.node(id).is_some_and(|n| matches!(n.op, Op::AllGather { .. }))) {
            if let Some(comps) = between(p, rs, ag) {
                moves.push(vec![Directive::FuseAllReduce { rs: rs.clone(), comps, ag: ag.clone(), name: None }]);
            }
        }
    }

    for id in order.iter().filter(|id| free(id)) {
        let n = p.node(id).expect("ordered");
        if matches!(n.op, Op::MatMul { .. }) {
            for c in p.consumers(id) {
                let direct = p.node(&c).is_some_and(|x| {
                    matches!(x.op, Op::AllReduce { .. } | Op::ReduceScatter { .. } | Op::FusedAllReduce { .. })
                        && input_node(&x.op) == Some(id.as_str())
                });
                if direct && free(&c) {
                    moves.push(vec![Directive::Overlap { ids: vec![id.clone(), c], name: None }]);
                }
            }
        }
        let is_head = n.op.is_communication()
            && !matches!(n.op, Op::Recv { .. })
            && !input_node(&n.op).and_then(|i| p.node(i)).is_some_and(|x| x.op.is_communication());
        if is_head {
            let chain = comm_chain(p, id);
            if chain.len() > 1 && chain.iter().all(|c| free(c)) {
                moves.push(vec![Directive::Overlap { ids: chain, name: None }]);
            }
        }
    }
    moves
}

/// All schedules reachable within the depth bound, starting with the
/// fusion-only schedule. Deterministic and free of isomorphic duplicates.
pub fn enumerate_schedules(p: &Program, cfg: &TuneConfig) -> Vec<Schedule> {
    let (pre, p0) = fusion_prepass(p, cfg.fusion_threshold);
    let depth = p.communication_count() + 3;
    let mut seen: HashSet<u64> = HashSet::from([canonical_form(&p0)]);
    let mut out = vec![Schedule::new(pre.clone())];
    let mut frontier = vec![(p0, pre)];
    for _ in 0..depth {
        let mut next = Vec::new();
        for (q, prefix) in &frontier {
            for mv in candidate_moves(q) {
                let mut r = q.clone();
                let ok = mv.iter().all(|d| match apply_directive(&r, d) {
                    Ok(a) => {
                        r = a.program;
                        true
                    }
                    Err(_) => false,
                });
                if !ok || !seen.insert(canonical_form(&r)) {
                    continue;
                }
                let mut s = prefix.clone();
                s.extend(mv);
                out.push(Schedule::new(s.clone()));
                next.push((r, s));
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    out
}

fn candidate(s: &Schedule, program: &Program, report: &RunReport) -> Candidate {
    Candidate {
        schedule: s.to_json(),
        label: s.to_string(),
        family: family(program),
        simulated_time: report.simulated_time,
        wall_time: report.wall_time,
        comm_bytes: report.comm_bytes.clone(),
        p2p_bytes: report.p2p_bytes.clone(),
        memory_bytes: report.memory_bytes.clone(),
        kernel_steps: report.kernel_steps,
        deviation: report.deviation.unwrap_or(f64::INFINITY),
        directives: s.clone(),
    }
}

/// Applies, runs, and oracle-checks one schedule.
pub fn evaluate(r: &Reference, s: &Schedule, cfg: &TuneConfig) -> Result<Candidate, TuneError> {
    let failed = |d: String| TuneError::CandidateFailed { schedule: s.to_string(), diagnostic: d };
    let t = apply_schedule(&r.base, s).map_err(|e| failed(e.to_string()))?;
    let report = r.check(&t.program, &cfg.comm, cfg.mode).map_err(|e| failed(e.to_string()))?;
    let c = candidate(s, &t.program, &report);
    if !(c.deviation <= cfg.tol) {
        return Err(failed(format!("deviation {:e} exceeds {:e}", c.deviation, cfg.tol)));
    }
    Ok(c)
}

fn evaluate_all(r: &Reference, schedules: &[Schedule], cfg: &TuneConfig) -> Vec<Result<Candidate, TuneError>> {
    #[cfg(feature = "parallel")]
    if cfg.parallel {
        use rayon::prelude::*;
        return schedules.par_iter().map(|s| evaluate(r, s, cfg)).collect();
    }
    schedules.iter().map(|s| evaluate(r, s, cfg)).collect()
}

/// Enumerates, evaluates every candidate, and picks the best one.
pub fn tune(p: &Program, cfg: &TuneConfig) -> Result<TuneReport, TuneError> {
    if cfg.fusion_threshold == 0 {
        return Err(TuneError::Config("fusion threshold must be at least 1".into()));
    }
    let schedules = enumerate_schedules(p, cfg);
    let reference = Reference::new(p, cfg.seed)?;
    let candidates = evaluate_all(&reference, &schedules, cfg).into_iter().collect::<Result<Vec<_>, _>>()?;
    let winner = (0..candidates.len())
        .min_by(|&a, &b| compare(&candidates[a], &candidates[b], cfg.metric))
        .expect("the fusion-only schedule is always a candidate");
    Ok(TuneReport { program: p.name.clone(), ranks: p.world_size(), metric: cfg.metric, candidates, winner })
}

//! Semantics-preserving program transformations and schedules.
//!
//! Every transformation takes a valid program and returns either a new valid
//! program or an error; nothing is applied partially.

mod directive;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::program::{
    has_errors, infer_program, topo_order, validate_program, DiagCode, Expr, Kernel, Layout, Op, OpNode, Operand,
    Program, Source, Stmt,
};

pub use directive::{Directive, Schedule};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransformError {
    #[error("unknown reference {0}")]
    Unknown(String),
    #[error("wrong kind: {0}")]
    WrongKind(String),
    #[error("{0} is not an all_reduce")]
    NotAllReduce(String),
    #[error("not sliceable: {0}")]
    NotSliceable(String),
    #[error("not a consumer of the collective: {0}")]
    NotAConsumer(String),
    #[error("not a computation: {0}")]
    NotComputation(String),
    #[error("dependency violation: {0}")]
    DependencyViolation(String),
    #[error("chain broken: {0}")]
    ChainBroken(String),
    #[error("send does not consume the computation: {0}")]
    NotConsumer(String),
    #[error("not a producer-consumer chain: {0}")]
    NotProducerConsumerChain(String),
    #[error("consumer not sliced: {0}")]
    ConsumerNotSliced(String),
    #[error("still live: {0}")]
    StillLive(String),
    #[error("name already in use: {0}")]
    NameInUse(String),
    #[error("result failed validation: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, TransformError>;

/// A transformed program with the ids it created and removed.
#[derive(Debug, Clone)]
pub struct Applied {
    pub program: Program,
    pub created: Vec<String>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceEntry {
    pub index: usize,
    pub directive: String,
    pub removed: Vec<String>,
    pub created: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Transformed {
    pub program: Program,
    pub provenance: Vec<ProvenanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("directive {index} ({directive}): {error}")]
pub struct ScheduleError {
    pub index: usize,
    pub directive: String,
    pub error: TransformError,
}

/// Applies directives in order; the error names the first failing directive.
pub fn apply_schedule(p: &Program, s: &Schedule) -> std::result::Result<Transformed, ScheduleError> {
    let mut program = p.clone();
    let mut provenance = Vec::new();
    for (index, d) in s.directives.iter().enumerate() {
        let applied = apply_directive(&program, d).map_err(|error| ScheduleError {
            index,
            directive: d.to_string(),
            error,
        })?;
        provenance.push(ProvenanceEntry {
            index,
            directive: d.to_string(),
            removed: applied.removed,
            created: applied.created,
        });
        program = applied.program;
    }
    Ok(Transformed { program, provenance })
}

pub fn apply_directive(p: &Program, d: &Directive) -> Result<Applied> {
    match d {
        Directive::SplitArRsAg { target, names } => split_allreduce(p, target, names),
        Directive::ReorderAllGather { ag, comps, names } => reorder(p, ag, comps, names, false),
        Directive::ReorderBroadcast { bc, comps, names } => reorder(p, bc, comps, names, true),
        Directive::FuseComputation { ids, name } => fuse_computation(p, ids, name.as_deref()),
        Directive::FuseAllReduce { rs, comps, ag, name } => fuse_allreduce(p, rs, comps, ag, name.as_deref()),
        Directive::FuseSend { comp, send, name } => fuse_send(p, comp, send, name.as_deref()),
        Directive::Overlap { ids, name } => overlap(p, ids, name.as_deref()),
        Directive::AsSlice { tensor } => as_slice(p, tensor),
        Directive::Dead { id } => dead(p, id),
    }
}

fn node<'a>(p: &'a Program, id: &str) -> Result<&'a OpNode> {
    p.node(id).ok_or_else(|| TransformError::Unknown(id.to_string()))
}

/// Allocates ids for created nodes: caller-supplied names first, otherwise
/// fresh names derived from a base.
struct Namer {
    used: BTreeSet<String>,
    given: Vec<String>,
    next: usize,
}

impl Namer {
    fn new(p: &Program, given: &[String]) -> Namer {
        Namer { used: p.used_names(), given: given.to_vec(), next: 0 }
    }

    fn take(&mut self, base: &str) -> Result<String> {
        let name = match self.given.get(self.next) {
            Some(g) => {
                if self.used.contains(g) {
                    return Err(TransformError::NameInUse(g.clone()));
                }
                g.clone()
            }
            None if !self.used.contains(base) => base.to_string(),
            None => (2..).map(|i| format!("{base}_{i}")).find(|c| !self.used.contains(c)).expect("unbounded"),
        };
        self.next += 1;
        self.used.insert(name.clone());
        Ok(name)
    }
}

/// Redirects reads of `from` to `to` in every node outside `skip`, and in the
/// program outputs when both are plain node values.
fn rewire(p: &mut Program, from: &Source, to: &Source, skip: &BTreeSet<String>) {
    for n in p.nodes.iter_mut().filter(|n| !skip.contains(&n.id)) {
        n.op.map_operands(&mut |o| {
            if &o.source == from {
                o.source = to.clone();
            }
        });
    }
    if let (Source::Node(a), Source::Node(b)) = (from, to) {
        for o in &mut p.outputs {
            if o == a {
                *o = b.clone();
            }
        }
    }
}

/// Nodes outside `set` reading `src`.
fn outside_readers(p: &Program, src: &Source, set: &BTreeSet<String>) -> Vec<String> {
    p.nodes
        .iter()
        .filter(|n| !set.contains(&n.id) && n.op.operands().iter().any(|o| &o.source == src))
        .map(|n| n.id.clone())
        .collect()
}

fn replace_node(p: &mut Program, id: &str, new: OpNode) {
    let pos = p.nodes.iter().position(|n| n.id == id).expect("replaced node exists");
    p.nodes[pos] = new;
}

fn insert_after(p: &mut Program, id: &str, new: OpNode) {
    let pos = p.nodes.iter().position(|n| n.id == id).expect("anchor exists");
    p.nodes.insert(pos + 1, new);
}

fn remove_nodes(p: &mut Program, ids: &BTreeSet<String>) {
    p.nodes.retain(|n| !ids.contains(&n.id));
}

fn sort_topologically(p: &Program, ids: &[String]) -> Result<Vec<String>> {
    let order = topo_order(p);
    let mut unique = BTreeSet::new();
    for id in ids {
        node(p, id)?;
        if !unique.insert(id.clone()) {
            return Err(TransformError::DependencyViolation(format!("{id} listed twice")));
        }
    }
    Ok(order.into_iter().filter(|id| unique.contains(id)).collect())
}

/// Re-infers and validates a rewritten program. Inference failures are
/// reported through `on_error`.
fn finish(p: Program, on_error: fn(String) -> TransformError) -> Result<Program> {
    if topo_order(&p).len() != p.nodes.len() {
        return Err(TransformError::DependencyViolation("the rewrite introduces a dependency cycle".into()));
    }
    let inferred = infer_program(&p).map_err(|(id, e)| on_error(format!("{id}: {e}")))?;
    let diags = validate_program(&inferred);
    if has_errors(&diags) {
        let first = diags.iter().find(|d| d.severity == crate::program::Severity::Error).expect("has errors");
        if first.code == DiagCode::Cycle {
            return Err(TransformError::DependencyViolation(first.to_string()));
        }
        return Err(on_error(first.to_string()));
    }
    Ok(inferred)
}

fn invalid(msg: String) -> TransformError {
    TransformError::Invalid(msg)
}

pub fn split_allreduce(p: &Program, ar: &str, names: &[String]) -> Result<Applied> {
    let n = node(p, ar)?;
    let Op::AllReduce { reducer, input } = &n.op else {
        return Err(TransformError::NotAllReduce(ar.to_string()));
    };
    let mut namer = Namer::new(p, names);
    let rs = namer.take(&format!("rs_{ar}"))?;
    let ag = namer.take(&format!("ag_{ar}"))?;
    let mut q = p.clone();
    let rs_node = OpNode::new(&rs, Op::ReduceScatter { reducer: *reducer, input: input.clone(), axis: None });
    let ag_node = OpNode::new(&ag, Op::AllGather { input: Operand::node(&rs), restores: None });
    replace_node(&mut q, ar, rs_node);
    insert_after(&mut q, &rs, ag_node);
    rewire(&mut q, &Source::Node(ar.to_string()), &Source::Node(ag.clone()), &BTreeSet::new());
    Ok(Applied { program: finish(q, invalid)?, created: vec![rs, ag], removed: vec![ar.to_string()] })
}

fn kernel_of(op: &Op) -> Option<&Kernel> {
    match op {
        Op::Compute(k) => Some(k),
        Op::Send { payload, .. } => Some(payload),
        _ => None,
    }
}

/// Moves computations across an AllGather (onto its sliced input) or across a
/// Broadcast (onto the root's input), then re-creates the collective on the
/// results that are still needed.
pub fn reorder(p: &Program, coll: &str, comps: &[String], names: &[String], broadcast: bool) -> Result<Applied> {
    let cnode = node(p, coll)?;
    let (x, root) = match (&cnode.op, broadcast) {
        (Op::AllGather { input, restores: None }, false) => (input.clone(), None),
        (Op::Broadcast { input, root, restores: None }, true) => (input.clone(), Some(*root)),
        (Op::AllGather { .. }, false) | (Op::Broadcast { .. }, true) => {
            return Err(TransformError::NotSliceable(format!("{coll} restores a tensor and cannot move")));
        }
        _ => {
            let want = if broadcast { "broadcast" } else { "all_gather" };
            return Err(TransformError::WrongKind(format!("{coll} is not a {want}")));
        }
    };
    if comps.is_empty() {
        return Ok(Applied { program: p.clone(), created: Vec::new(), removed: Vec::new() });
    }
    let x_info = p.operand_info(&x).ok_or_else(|| TransformError::Unknown(x.to_string()))?;
    let axis = match x_info.layout {
        Layout::Sliced(d) => Some(d),
        _ => None,
    };
    let comps = sort_topologically(p, comps)?;
    let set: BTreeSet<String> = comps.iter().cloned().collect();

    let mut reached: BTreeSet<String> = BTreeSet::from([coll.to_string()]);
    for c in &comps {
        let n = node(p, c)?;
        let ok_kind = matches!(n.op, Op::Compute(_)) || (!broadcast && matches!(n.op, Op::Send { .. }));
        if !ok_kind {
            return Err(TransformError::NotSliceable(format!("{c} is a {} node", n.op.kind_name())));
        }
        let k = kernel_of(&n.op).expect("kernel node");
        if k.has_reduction() {
            return Err(TransformError::NotSliceable(format!("{c} reduces across the distributed axis")));
        }
        if n.op.node_deps().is_disjoint(&reached) {
            return Err(TransformError::NotAConsumer(format!("{c} does not consume {coll}")));
        }
        reached.insert(c.clone());
    }

    let mut namer = Namer::new(p, names);
    let mut sc_of: BTreeMap<String, String> = BTreeMap::new();
    for c in &comps {
        sc_of.insert(c.clone(), namer.take(&format!("sc_{c}"))?);
    }

    let mut q = p.clone();
    let mut created: Vec<String> = comps.iter().map(|c| sc_of[c].clone()).collect();
    for c in &comps {
        let mut op = node(p, c)?.op.clone();
        let mut err = None;
        op.map_operands(&mut |o| match &o.source {
            Source::Node(n) if n == coll => *o = x.clone(),
            Source::Node(n) if set.contains(n) => o.source = Source::Node(sc_of[n].clone()),
            Source::Written { node, tensor } if set.contains(node) => {
                o.source = Source::Written { node: sc_of[node].clone(), tensor: tensor.clone() };
            }
            _ => {
                let info = p.operand_info(o).expect("valid program");
                match (info.layout, axis) {
                    (Layout::Replicated, Some(d)) => {
                        let full = info.shape.len() == x_info.shape.len() && info.shape[d] == x_info.shape[d];
                        if o.slice.is_none() && full && info.shape[d] > 1 {
                            o.slice = Some(d);
                        }
                    }
                    (Layout::Replicated, None) => {}
                    (Layout::Sliced(a), Some(d)) if o.slice.is_none() && a + x_info.shape.len() == d + info.shape.len() => {}
                    (l, _) => {
                        err.get_or_insert(TransformError::NotSliceable(format!("{c} reads {o}, a {l} value")));
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut n = OpNode::new(sc_of[c].clone(), op);
        n.info = node(p, c)?.info.clone();
        replace_node(&mut q, c, n);
    }

    let make = |input: Operand, restores: Option<String>| match root {
        None => Op::AllGather { input, restores },
        Some(root) => Op::Broadcast { input, root, restores },
    };
    let prefix = if broadcast { "bc" } else { "ag" };
    for c in &comps {
        let sc = sc_of[c].clone();
        let k = kernel_of(&node(p, c)?.op).expect("kernel node").clone();
        let replicated_targets: Vec<String> = k
            .updates()
            .into_iter()
            .filter(|t| p.tensor(t).is_some_and(|d| d.layout == Layout::Replicated))
            .map(str::to_string)
            .collect();
        let primary_target = k.primary().update.clone().filter(|t| replicated_targets.contains(t));
        let c_src = Source::Node(c.clone());
        if matches!(node(p, c)?.op, Op::Send { .. }) {
            // The gather runs in the receiving group, after the matching receive.
            rewire(&mut q, &c_src, &Source::Node(sc.clone()), &BTreeSet::new());
            let recvs: Vec<String> =
                q.consumers(&sc).into_iter().filter(|r| q.node(r).is_some_and(|n| matches!(n.op, Op::Recv { .. }))).collect();
            for r in recvs {
                let id = namer.take(&format!("{prefix}_{c}"))?;
                insert_after(&mut q, &r, OpNode::new(&id, make(Operand::node(&r), None)));
                rewire(&mut q, &Source::Node(r.clone()), &Source::Node(id.clone()), &BTreeSet::from([id.clone()]));
                created.push(id);
            }
            continue;
        }
        let exported = !outside_readers(&q, &c_src, &set).is_empty() || p.is_output(c);
        let mut anchor = sc.clone();
        if exported || primary_target.is_some() {
            let id = namer.take(&format!("{prefix}_{c}"))?;
            insert_after(&mut q, &anchor, OpNode::new(&id, make(Operand::node(&sc), primary_target.clone())));
            rewire(&mut q, &c_src, &Source::Node(id.clone()), &BTreeSet::from([id.clone()]));
            if let Some(t) = &primary_target {
                let w = Source::Written { node: c.clone(), tensor: t.clone() };
                rewire(&mut q, &w, &Source::Node(id.clone()), &BTreeSet::new());
            }
            created.push(id.clone());
            anchor = id;
        }
        for t in k.updates() {
            let w = Source::Written { node: c.clone(), tensor: t.to_string() };
            if primary_target.as_deref() == Some(t) {
                continue;
            }
            if replicated_targets.iter().any(|r| r == t) {
                let id = namer.take(&format!("{prefix}_{t}"))?;
                let input = Operand::written(&sc, t);
                insert_after(&mut q, &anchor, OpNode::new(&id, make(input, Some(t.to_string()))));
                rewire(&mut q, &w, &Source::Node(id.clone()), &BTreeSet::new());
                created.push(id.clone());
                anchor = id;
            } else {
                rewire(&mut q, &w, &Source::Written { node: sc.clone(), tensor: t.to_string() }, &BTreeSet::new());
            }
        }
    }

    let mut removed = comps.clone();
    if q.consumers(coll).is_empty() && !q.is_output(coll) {
        remove_nodes(&mut q, &BTreeSet::from([coll.to_string()]));
        removed.push(coll.to_string());
    }
    let program = finish(q, TransformError::NotSliceable)?;
    Ok(Applied { program, created, removed })
}

/// Concatenates the kernels of `members` (topologically sorted) into one,
/// turning reads of member values into statement references.
fn merge_kernels(p: &Program, members: &[String], taken: &BTreeSet<String>) -> Result<Kernel> {
    let set: BTreeSet<&str> = members.iter().map(String::as_str).collect();
    let mut used: BTreeSet<String> = taken.clone();
    let mut primary: BTreeMap<String, String> = BTreeMap::new();
    let mut writer: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut stmts: Vec<Stmt> = Vec::new();
    let mut targets = BTreeSet::new();
    for m in members {
        let k = match &node(p, m)?.op {
            Op::Compute(k) => k.clone(),
            other => return Err(TransformError::NotComputation(format!("{m} is a {} node", other.kind_name()))),
        };
        let mut rename: BTreeMap<String, String> = BTreeMap::new();
        for s in &k.stmts {
            let fresh = if used.contains(&s.name) {
                (2..).map(|i| format!("{}_{i}", s.name)).find(|c| !used.contains(c)).expect("unbounded")
            } else {
                s.name.clone()
            };
            used.insert(fresh.clone());
            rename.insert(s.name.clone(), fresh);
        }
        for s in &k.stmts {
            let mut expr = s.expr.clone();
            let mut err = None;
            expr.visit_mut(&mut |e| {
                let replacement = match e {
                    Expr::Member(name) => Expr::Member(rename[name.as_str()].clone()),
                    Expr::Operand(o) if o.slice.is_none() => match &o.source {
                        Source::Node(n) if set.contains(n.as_str()) => Expr::Member(primary[n].clone()),
                        Source::Written { node, tensor } if set.contains(node.as_str()) => {
                            match writer.get(&(node.clone(), tensor.clone())) {
                                Some(w) => Expr::Member(w.clone()),
                                None => {
                                    err = Some(TransformError::DependencyViolation(format!("{o} is not produced")));
                                    return;
                                }
                            }
                        }
                        _ => return,
                    },
                    Expr::Operand(o) if o.node_dep().is_some_and(|n| set.contains(n)) => {
                        err = Some(TransformError::DependencyViolation(format!("slice view {o} of a fused value")));
                        return;
                    }
                    _ => return,
                };
                *e = replacement;
            });
            if let Some(e) = err {
                return Err(e);
            }
            if let Some(t) = &s.update {
                if !targets.insert(t.clone()) {
                    return Err(TransformError::DependencyViolation(format!("{t} would be updated twice")));
                }
                writer.insert((m.clone(), t.clone()), rename[&s.name].clone());
            }
            stmts.push(Stmt { name: rename[&s.name].clone(), expr, update: s.update.clone() });
        }
        primary.insert(m.clone(), rename[&k.primary().name].clone());
    }
    Ok(Kernel { stmts })
}

fn weakly_connected(p: &Program, ids: &[String]) -> bool {
    let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::from([ids[0].as_str()]);
    let mut stack = vec![ids[0].as_str()];
    while let Some(a) = stack.pop() {
        for b in &set {
            if seen.contains(b) {
                continue;
            }
            let adjacent = p.node(a).is_some_and(|n| n.op.node_deps().contains(*b))
                || p.node(b).is_some_and(|n| n.op.node_deps().contains(a));
            if adjacent {
                seen.insert(b);
                stack.push(b);
            }
        }
    }
    seen.len() == set.len()
}

fn names_outside(p: &Program, set: &BTreeSet<String>) -> BTreeSet<String> {
    let mut taken: BTreeSet<String> = p.tensors.iter().map(|t| t.name.clone()).collect();
    taken.extend(p.nodes.iter().filter(|n| !set.contains(&n.id)).map(|n| n.id.clone()));
    taken
}

pub fn fuse_computation(p: &Program, ids: &[String], name: Option<&str>) -> Result<Applied> {
    if ids.is_empty() {
        return Err(TransformError::NotComputation("nothing to fuse".into()));
    }
    let members = sort_topologically(p, ids)?;
    for m in &members {
        if !node(p, m)?.op.is_compute() {
            return Err(TransformError::NotComputation(format!("{m} is a {} node", node(p, m)?.op.kind_name())));
        }
        if p.group_of_member(m).is_some() {
            return Err(TransformError::DependencyViolation(format!("{m} belongs to an overlap group")));
        }
    }
    if members.len() == 1 {
        return Ok(Applied { program: p.clone(), created: Vec::new(), removed: Vec::new() });
    }
    if !weakly_connected(p, &members) {
        return Err(TransformError::DependencyViolation("the nodes do not form a connected chain".into()));
    }
    let set: BTreeSet<String> = members.iter().cloned().collect();
    let last = members.last().expect("non-empty").clone();
    let mut namer = Namer::new(p, &name.map(|n| vec![n.to_string()]).unwrap_or_default());
    let fused = namer.take(&format!("fused_{}", members[0]))?;
    let mut taken = names_outside(p, &set);
    taken.insert(fused.clone());
    let kernel = merge_kernels(p, &members, &taken)?;

    let mut q = p.clone();
    for m in &members {
        let n = node(p, m)?;
        let k = kernel_of(&n.op).expect("compute");
        let readers = outside_readers(p, &Source::Node(m.clone()), &set);
        if m != &last {
            if p.is_output(m) {
                return Err(TransformError::DependencyViolation(format!("{m} is a program output")));
            }
            if !readers.is_empty() {
                match &k.primary().update {
                    Some(t) => rewire(
                        &mut q,
                        &Source::Node(m.clone()),
                        &Source::Written { node: fused.clone(), tensor: t.clone() },
                        &set,
                    ),
                    None => {
                        return Err(TransformError::DependencyViolation(format!(
                            "{} reads the intermediate {m}",
                            readers[0]
                        )))
                    }
                }
            }
        }
        for t in k.updates() {
            rewire(
                &mut q,
                &Source::Written { node: m.clone(), tensor: t.to_string() },
                &Source::Written { node: fused.clone(), tensor: t.to_string() },
                &set,
            );
        }
    }
    rewire(&mut q, &Source::Node(last.clone()), &Source::Node(fused.clone()), &set);
    replace_node(&mut q, &last, OpNode::new(&fused, Op::Compute(kernel)));
    let mut rest = set.clone();
    rest.remove(&last);
    remove_nodes(&mut q, &rest);
    let program = finish(q, TransformError::DependencyViolation)?;
    Ok(Applied { program, created: vec![fused], removed: members })
}

pub fn fuse_allreduce(p: &Program, rs: &str, comps: &[String], ag: &str, name: Option<&str>) -> Result<Applied> {
    let Op::ReduceScatter { reducer, input, axis } = &node(p, rs)?.op else {
        return Err(TransformError::WrongKind(format!("{rs} is not a reduce_scatter")));
    };
    let Op::AllGather { input: ag_input, restores } = &node(p, ag)?.op else {
        return Err(TransformError::WrongKind(format!("{ag} is not an all_gather")));
    };
    for id in [rs, ag].iter().map(|s| s.to_string()).chain(comps.iter().cloned()) {
        if p.group_of_member(&id).is_some() {
            return Err(TransformError::ChainBroken(format!("{id} belongs to an overlap group")));
        }
    }
    let comps = sort_topologically(p, comps)?;
    let mut set: BTreeSet<String> = comps.iter().cloned().collect();
    set.insert(rs.to_string());
    set.insert(ag.to_string());
    let broken = |m: String| Err(TransformError::ChainBroken(m));

    let rs_readers = outside_readers(p, &Source::Node(rs.to_string()), &BTreeSet::new());
    let expected_reader: BTreeSet<String> =
        if comps.is_empty() { BTreeSet::from([ag.to_string()]) } else { comps.iter().cloned().collect() };
    if rs_readers.iter().any(|r| !expected_reader.contains(r)) || p.is_output(rs) {
        return broken(format!("{rs} is read outside the chain"));
    }
    let tail = comps.last().cloned().unwrap_or_else(|| rs.to_string());
    if ag_input != &Operand::node(&tail) {
        return broken(format!("{ag} does not gather {tail}"));
    }
    let mut namer = Namer::new(p, &name.map(|n| vec![n.to_string()]).unwrap_or_default());
    let mut q = p.clone();

    let op = if comps.is_empty() {
        if restores.is_some() {
            return broken(format!("{ag} restores a tensor"));
        }
        Op::AllReduce { reducer: *reducer, input: input.clone() }
    } else {
        let mut reached = BTreeSet::from([rs.to_string()]);
        for c in &comps {
            let n = node(p, c)?;
            if !n.op.is_compute() {
                return Err(TransformError::NotComputation(format!("{c} is a {} node", n.op.kind_name())));
            }
            if n.op.node_deps().is_disjoint(&reached) {
                return broken(format!("{c} is not downstream of {rs}"));
            }
            reached.insert(c.clone());
            let readers = outside_readers(p, &Source::Node(c.clone()), &set);
            if !readers.is_empty() || p.is_output(c) {
                return broken(format!("{c} is read outside the chain"));
            }
            for t in kernel_of(&n.op).expect("compute").updates() {
                let w = Source::Written { node: c.clone(), tensor: t.to_string() };
                if !outside_readers(p, &w, &set).is_empty() {
                    return broken(format!("the value {c} writes to {t} is read outside the chain"));
                }
            }
        }
        let mut taken = names_outside(p, &set);
        taken.insert(rs.to_string());
        let mut kernel = merge_kernels(p, &comps, &taken)?;
        for s in &mut kernel.stmts {
            s.expr.visit_mut(&mut |e| {
                if matches!(e, Expr::Operand(o) if o.source == Source::Node(rs.to_string()) && o.slice.is_none()) {
                    *e = Expr::InFlight;
                }
            });
        }
        if kernel.operands().iter().any(|o| o.node_dep() == Some(rs)) {
            return broken(format!("{rs} is read through a view"));
        }
        Op::FusedAllReduce { reducer: *reducer, input: input.clone(), kernel, axis: *axis, restores: restores.clone() }
    };
    let base = if comps.is_empty() { format!("ar_{ag}") } else { format!("fused_{ag}") };
    let fused = namer.take(&base)?;
    rewire(&mut q, &Source::Node(ag.to_string()), &Source::Node(fused.clone()), &set);
    if let Some(t) = restores {
        rewire(
            &mut q,
            &Source::Written { node: ag.to_string(), tensor: t.clone() },
            &Source::Written { node: fused.clone(), tensor: t.clone() },
            &set,
        );
    }
    replace_node(&mut q, ag, OpNode::new(&fused, op));
    let mut gone = set.clone();
    gone.remove(ag);
    remove_nodes(&mut q, &gone);
    let mut removed = vec![rs.to_string()];
    removed.extend(comps);
    removed.push(ag.to_string());
    Ok(Applied { program: finish(q, TransformError::ChainBroken)?, created: vec![fused], removed })
}

pub fn fuse_send(p: &Program, comp: &str, send: &str, name: Option<&str>) -> Result<Applied> {
    let Op::Send { payload, dest } = &node(p, send)?.op else {
        return Err(TransformError::WrongKind(format!("{send} is not a send")));
    };
    let consumes = payload.is_identity()
        && matches!(&payload.stmts[0].expr, Expr::Operand(o) if *o == Operand::node(comp));
    if !consumes {
        return Err(TransformError::NotConsumer(format!("{send} does not send {comp} unchanged")));
    }
    let k = match &node(p, comp)?.op {
        Op::Compute(k) if k.updates().is_empty() && !k.has_reduction() => k.clone(),
        other => {
            return Err(TransformError::NotComputation(format!(
                "{comp} ({}) is not an element-wise computation",
                other.kind_name()
            )))
        }
    };
    let set = BTreeSet::from([comp.to_string(), send.to_string()]);
    if !outside_readers(p, &Source::Node(comp.to_string()), &set).is_empty() || p.is_output(comp) {
        return Err(TransformError::DependencyViolation(format!("{comp} has other readers")));
    }
    for id in [comp, send] {
        if p.group_of_member(id).is_some() {
            return Err(TransformError::DependencyViolation(format!("{id} belongs to an overlap group")));
        }
    }
    let mut namer = Namer::new(p, &name.map(|n| vec![n.to_string()]).unwrap_or_default());
    let fused = namer.take(&format!("fused_{send}"))?;
    let mut q = p.clone();
    rewire(&mut q, &Source::Node(send.to_string()), &Source::Node(fused.clone()), &set);
    replace_node(&mut q, send, OpNode::new(&fused, Op::Send { payload: k, dest: *dest }));
    remove_nodes(&mut q, &BTreeSet::from([comp.to_string()]));
    Ok(Applied {
        program: finish(q, invalid)?,
        created: vec![fused],
        removed: vec![comp.to_string(), send.to_string()],
    })
}

/// Inserts the receive between a send and the next listed member when the
/// member reads the received value.
fn with_receives(p: &Program, ids: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        out.push(id.clone());
        let Some(next) = ids.get(i + 1) else { continue };
        if !matches!(node(p, id)?.op, Op::Send { .. }) {
            continue;
        }
        let deps = node(p, next)?.op.node_deps();
        if deps.contains(id) {
            continue;
        }
        if let Some(r) = p
            .consumers(id)
            .into_iter()
            .find(|r| deps.contains(r) && p.node(r).is_some_and(|n| matches!(n.op, Op::Recv { .. })))
        {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn overlap(p: &Program, ids: &[String], name: Option<&str>) -> Result<Applied> {
    if ids.len() < 2 {
        return Err(TransformError::NotProducerConsumerChain("an overlap needs at least two operations".into()));
    }
    let ids = &with_receives(p, ids)?;
    for (i, id) in ids.iter().enumerate() {
        let n = node(p, id)?;
        if matches!(n.op, Op::Overlap { .. }) || p.group_of_member(id).is_some() {
            return Err(TransformError::NotProducerConsumerChain(format!("{id} is already overlapped")));
        }
        if i > 0 && !n.op.node_deps().contains(&ids[i - 1]) {
            return Err(TransformError::NotProducerConsumerChain(format!("{id} does not consume {}", ids[i - 1])));
        }
    }
    let set: BTreeSet<String> = ids.iter().cloned().collect();
    let last = ids.last().expect("non-empty").clone();
    for id in ids {
        let n = node(p, id)?;
        let readers: Vec<String> = p.consumers(id).into_iter().filter(|r| !set.contains(r)).collect();
        if id != &last && (!readers.is_empty() || p.is_output(id)) {
            return Err(TransformError::NotProducerConsumerChain(format!("{id} is also read outside the chain")));
        }
        if id == &last && n.writes.iter().any(|(t, _)| !outside_readers(p, &Source::Written { node: id.clone(), tensor: t.clone() }, &set).is_empty()) {
            return Err(TransformError::NotProducerConsumerChain(format!("{id} has written values read elsewhere")));
        }
    }
    let mut namer = Namer::new(p, &name.map(|n| vec![n.to_string()]).unwrap_or_default());
    let group = namer.take(&format!("ol_{}", ids[0]))?;
    let mut q = p.clone();
    rewire(&mut q, &Source::Node(last.clone()), &Source::Node(group.clone()), &set);
    insert_after(&mut q, &last, OpNode::new(&group, Op::Overlap { members: ids.to_vec() }));
    Ok(Applied { program: finish(q, invalid)?, created: vec![group], removed: Vec::new() })
}

pub fn as_slice(p: &Program, tensor: &str) -> Result<Applied> {
    let decl = p.tensor(tensor).ok_or_else(|| TransformError::Unknown(tensor.to_string()))?;
    if decl.layout != Layout::Replicated {
        return Err(TransformError::ConsumerNotSliced(format!("{tensor} is {} already", decl.layout)));
    }
    let src = Source::Tensor(tensor.to_string());
    let mut axis: Option<usize> = None;
    for n in &p.nodes {
        for o in n.op.operands().into_iter().filter(|o| o.source == src) {
            match (o.slice, axis) {
                (None, _) => {
                    return Err(TransformError::ConsumerNotSliced(format!("{} reads {tensor} whole", n.id)));
                }
                (Some(d), Some(a)) if d != a => {
                    return Err(TransformError::ConsumerNotSliced(format!("{tensor} is sliced on axes {a} and {d}")));
                }
                (Some(d), _) => axis = Some(d),
            }
        }
    }
    let mut restoring = BTreeSet::new();
    for w in p.writers_of(tensor) {
        let n = node(p, &w)?;
        let restores = match &n.op {
            Op::AllGather { restores, .. } | Op::Broadcast { restores, .. } => restores.as_deref() == Some(tensor),
            _ => false,
        };
        if restores {
            let written = Source::Written { node: w.clone(), tensor: tensor.to_string() };
            if !outside_readers(p, &written, &BTreeSet::new()).is_empty() {
                return Err(TransformError::ConsumerNotSliced(format!("the value {w} restores is read")));
            }
            restoring.insert(w);
            continue;
        }
        let layout = n.writes.iter().find(|(t, _)| t == tensor).map(|(_, i)| i.layout).expect("writer");
        match (layout, axis) {
            (Layout::Sliced(d), None) => axis = Some(d),
            (Layout::Sliced(d), Some(a)) if d == a => {}
            (l, _) => {
                return Err(TransformError::ConsumerNotSliced(format!("{w} writes {tensor} as {l}")));
            }
        }
    }
    let Some(axis) = axis else {
        return Err(TransformError::ConsumerNotSliced(format!("{tensor} has no sliced consumer")));
    };
    let mut q = p.clone();
    q.tensor_mut(tensor).expect("declared").layout = Layout::Sliced(axis);
    for n in &mut q.nodes {
        n.op.map_operands(&mut |o| {
            if o.source == src {
                o.slice = None;
            }
        });
        if restoring.contains(&n.id) {
            match &mut n.op {
                Op::AllGather { restores, .. } | Op::Broadcast { restores, .. } => *restores = None,
                _ => unreachable!("restoring collectives only"),
            }
        }
    }
    Ok(Applied { program: finish(q, TransformError::ConsumerNotSliced)?, created: Vec::new(), removed: Vec::new() })
}

pub fn dead(p: &Program, id: &str) -> Result<Applied> {
    node(p, id)?;
    if p.is_output(id) {
        return Err(TransformError::StillLive(format!("{id} is a program output")));
    }
    if let Some(reader) = p.consumers(id).first() {
        return Err(TransformError::StillLive(format!("{id} is read by {reader}")));
    }
    if p.final_writers().iter().any(|(_, w)| w == id) {
        return Err(TransformError::StillLive(format!("{id} holds the final value of a tensor")));
    }
    let mut q = p.clone();
    remove_nodes(&mut q, &BTreeSet::from([id.to_string()]));
    Ok(Applied { program: finish(q, invalid)?, created: Vec::new(), removed: vec![id.to_string()] })
}

/// Kernel of a computation-carrying node, for callers outside this module.
pub fn node_kernel(op: &Op) -> Option<&Kernel> {
    kernel_of(op)
}

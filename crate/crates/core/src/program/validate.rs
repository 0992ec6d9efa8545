use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::Serialize;

use super::infer::{infer_node, LayoutError};
use super::{Layout, Op, Program, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagCode {
    DuplicateId,
    DanglingReference,
    Cycle,
    GroupPartition,
    InvalidDecl,
    Divisibility,
    LayoutMismatch,
    ShapeMismatch,
    InvalidInput,
    GroupMismatch,
    NoSuchGroup,
    InferenceDrift,
    RedundantAllReduce,
    WriteOrder,
    StateLayout,
    OverlapMembership,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagCode,
    pub node: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.node {
            Some(n) => write!(f, "{sev}[{:?}] {n}: {}", self.code, self.message),
            None => write!(f, "{sev}[{:?}] {}", self.code, self.message),
        }
    }
}

fn diag(severity: Severity, code: DiagCode, node: Option<&str>, message: impl Into<String>) -> Diagnostic {
    Diagnostic { severity, code, node: node.map(str::to_string), message: message.into() }
}

fn error_code(e: &LayoutError) -> DiagCode {
    match e {
        LayoutError::LayoutMismatch(_) => DiagCode::LayoutMismatch,
        LayoutError::ShapeMismatch(_) => DiagCode::ShapeMismatch,
        LayoutError::InvalidInput(_) => DiagCode::InvalidInput,
        LayoutError::Divisibility(_) => DiagCode::Divisibility,
        LayoutError::GroupMismatch(_) => DiagCode::GroupMismatch,
        LayoutError::UnknownReference(_) => DiagCode::DanglingReference,
        LayoutError::NoSuchGroup(_) => DiagCode::NoSuchGroup,
    }
}

/// Deterministic topological order; ready nodes are taken by ascending id.
/// Nodes on cycles or depending on missing nodes are omitted.
pub fn topo_order(p: &Program) -> Vec<String> {
    let ids: BTreeSet<&str> = p.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut users: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut blocked: HashSet<&str> = HashSet::new();
    for n in &p.nodes {
        let deps = n.op.node_deps();
        let mut count = 0;
        for d in &deps {
            match ids.get(d.as_str()) {
                Some(&d) => {
                    users.entry(d).or_default().push(&n.id);
                    count += 1;
                }
                None => {
                    blocked.insert(&n.id);
                }
            }
        }
        indegree.insert(&n.id, count);
    }
    let mut ready: BTreeSet<&str> =
        indegree.iter().filter(|(id, &c)| c == 0 && !blocked.contains(*id)).map(|(id, _)| *id).collect();
    let mut order = Vec::with_capacity(p.nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &u in users.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let c = indegree.get_mut(u).expect("known node");
            *c -= 1;
            if *c == 0 && !blocked.contains(u) {
                ready.insert(u);
            }
        }
    }
    order
}

/// Nodes that `id` depends on, transitively.
pub(crate) fn ancestors(p: &Program, id: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![id.to_string()];
    while let Some(n) = stack.pop() {
        if let Some(node) = p.node(&n) {
            for d in node.op.node_deps() {
                if seen.insert(d.clone()) {
                    stack.push(d);
                }
            }
        }
    }
    seen
}

/// Checks every construction rule; never aborts. An empty list (or one with
/// only warnings) means the program is valid.
pub fn validate_program(p: &Program) -> Vec<Diagnostic> {
    use DiagCode::*;
    use Severity::*;
    let mut out = Vec::new();

    let mut covered = 0;
    let mut sorted = p.groups.clone();
    sorted.sort_by_key(|g| g.first_rank);
    for (i, g) in sorted.iter().enumerate() {
        if g.size == 0 {
            out.push(diag(Error, GroupPartition, None, format!("group {} is empty", g.id)));
        }
        if g.first_rank != covered || g.id != i {
            out.push(diag(Error, GroupPartition, None, format!("group {} does not continue the rank partition", g.id)));
        }
        covered = g.first_rank + g.size;
    }
    if p.groups.is_empty() {
        out.push(diag(Error, GroupPartition, None, "program declares no process groups"));
    }

    let mut names = HashSet::new();
    for t in &p.tensors {
        if !names.insert(t.name.as_str()) {
            out.push(diag(Error, DuplicateId, Some(&t.name), "name declared twice"));
        }
        let Some(g) = p.group(t.group) else {
            out.push(diag(Error, DanglingReference, Some(&t.name), format!("unknown group {}", t.group)));
            continue;
        };
        if t.shape.contains(&0) {
            out.push(diag(Error, InvalidDecl, Some(&t.name), "extents must be positive"));
        }
        match t.layout {
            Layout::Sliced(d) if d >= t.shape.len() => {
                out.push(diag(Error, InvalidDecl, Some(&t.name), format!("slice axis {d} out of range")));
            }
            Layout::Sliced(d) if t.shape[d] % g.size != 0 => out.push(diag(
                Error,
                Divisibility,
                Some(&t.name),
                format!("axis {d} extent {} is not divisible by {} ranks", t.shape[d], g.size),
            )),
            Layout::Sliced(_) | Layout::Local if t.shape.is_empty() => {
                out.push(diag(Error, InvalidDecl, Some(&t.name), "a scalar must be Replicated"));
            }
            _ => {}
        }
    }
    for n in &p.nodes {
        if !names.insert(n.id.as_str()) {
            out.push(diag(Error, DuplicateId, Some(&n.id), "identifier used twice"));
        }
    }

    for n in &p.nodes {
        for o in n.op.operands() {
            let missing = match &o.source {
                Source::Tensor(t) => p.tensor(t).is_none(),
                Source::Node(d) => p.node(d).is_none(),
                Source::Written { node, tensor } => {
                    p.node(node).is_none_or(|w| !w.writes.iter().any(|(t, _)| t == tensor)) && p.tensor(tensor).is_none()
                }
            };
            if missing {
                out.push(diag(Error, DanglingReference, Some(&n.id), format!("unresolved operand {o}")));
            }
        }
        if let Op::Overlap { members } = &n.op {
            for m in members {
                if p.node(m).is_none() {
                    out.push(diag(Error, DanglingReference, Some(&n.id), format!("unknown member {m}")));
                }
            }
        }
    }
    for o in &p.outputs {
        if p.node(o).is_none() {
            out.push(diag(Error, DanglingReference, None, format!("output {o} does not exist")));
        }
    }
    if out.iter().any(|d| d.severity == Error) {
        return out;
    }

    let order = topo_order(p);
    if order.len() != p.nodes.len() {
        let placed: HashSet<&str> = order.iter().map(String::as_str).collect();
        for n in p.nodes.iter().filter(|n| !placed.contains(n.id.as_str())) {
            out.push(diag(Error, Cycle, Some(&n.id), "node lies on a dependency cycle"));
        }
        return out;
    }

    for id in &order {
        let n = p.node(id).expect("ordered");
        match infer_node(p, n) {
            Ok((info, writes)) => {
                if info != n.info || writes != n.writes {
                    out.push(diag(Error, InferenceDrift, Some(id), "stored layout differs from inference"));
                }
                if info.layout == Layout::Replicated || info.layout == Layout::Local {
                    // nothing to check
                } else if let (Layout::Sliced(d), Some(g)) = (info.layout, p.group(info.group)) {
                    if info.shape.get(d).is_none_or(|e| e % g.size != 0) {
                        out.push(diag(Error, Divisibility, Some(id), "sliced result is not evenly divisible"));
                    }
                }
            }
            Err(e) => out.push(diag(Error, error_code(&e), Some(id), e.to_string())),
        }
        if let Op::AllReduce { input, .. } = &n.op {
            if p.operand_info(input).is_some_and(|i| i.layout == Layout::Replicated) {
                out.push(diag(Warning, RedundantAllReduce, Some(id), "all_reduce of a Replicated value"));
            }
        }
    }

    let mut membership: BTreeMap<&str, &str> = BTreeMap::new();
    for n in &p.nodes {
        if let Op::Overlap { members } = &n.op {
            if members.len() < 2 {
                out.push(diag(Error, OverlapMembership, Some(&n.id), "an overlap group needs two members"));
            }
            for m in members {
                if let Some(prev) = membership.insert(m, &n.id) {
                    out.push(diag(Error, OverlapMembership, Some(m), format!("member of both {prev} and {}", n.id)));
                }
                if p.node(m).is_some_and(|x| matches!(x.op, Op::Overlap { .. })) {
                    out.push(diag(Error, OverlapMembership, Some(m), "overlap groups cannot nest"));
                }
            }
        }
    }

    for t in &p.tensors {
        let writers = p.writers_of(&t.name);
        for pair in writers.windows(2) {
            if !ancestors(p, &pair[1]).contains(&pair[0]) {
                out.push(diag(
                    Error,
                    WriteOrder,
                    Some(&pair[1]),
                    format!("writes {} without depending on the earlier writer {}", t.name, pair[0]),
                ));
            }
        }
        if let Some(last) = writers.last() {
            let w = p.node(last).expect("writer").writes.iter().find(|(x, _)| x == &t.name).expect("writes").1.clone();
            if w.layout != t.layout {
                out.push(diag(
                    Error,
                    StateLayout,
                    Some(last),
                    format!("final value of {} is {} but the tensor is declared {}", t.name, w.layout, t.layout),
                ));
            }
        }
    }

    let mut live: BTreeSet<String> = p.outputs.iter().cloned().collect();
    for (_, w) in p.final_writers() {
        live.insert(w);
    }
    let roots: Vec<String> = live.iter().cloned().collect();
    for r in roots {
        live.extend(ancestors(p, &r));
    }
    for n in &p.nodes {
        if !live.contains(&n.id) {
            out.push(diag(Warning, Unreachable, Some(&n.id), "result is never used"));
        }
    }
    out
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

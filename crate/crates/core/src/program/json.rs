//! Program JSON (de)serialization.
//!
//! Shape extents may be integers or size symbols (`"B"`, `"H"`, `"N"`, ...)
//! bound at load time; a group size may be `"auto"`, meaning an equal share
//! of the world.

use std::collections::{BTreeMap, HashSet};

use serde::Deserialize;
use serde_json::{json, Value};

use super::expr::{parse_expr, Expr, Kernel, Stmt};
use super::infer::infer_node;
use super::{
    topo_order, ElemType, InitSpec, Layout, Op, OpNode, Operand, PeerSpec, ProcessGroup, Program, Reducer, Source,
    TensorDecl,
};

#[derive(Debug, thiserror::Error)]
pub enum JsonError {
    #[error("malformed JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("schema error: {0}")]
    Schema(String),
}

fn schema<T>(msg: impl Into<String>) -> Result<T, JsonError> {
    Err(JsonError::Schema(msg.into()))
}

/// World size and size-symbol values used to instantiate a program.
#[derive(Debug, Clone, PartialEq)]
pub struct Bindings {
    pub ranks: usize,
    pub sizes: BTreeMap<String, usize>,
}

impl Bindings {
    pub fn new(ranks: usize) -> Bindings {
        Bindings { ranks, sizes: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, value: usize) -> Bindings {
        self.sizes.insert(name.to_string(), value);
        self
    }

    /// Parses `B=2,S=8,H=64` style assignments into the bindings.
    pub fn parse_assignments(&mut self, s: &str) -> Result<(), String> {
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {part}"))?;
            let v: usize = v.trim().parse().map_err(|_| format!("size {k} must be a positive integer"))?;
            if v == 0 {
                return Err(format!("size {k} must be positive"));
            }
            self.sizes.insert(k.trim().to_string(), v);
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProgram {
    name: String,
    groups: Vec<RawGroup>,
    tensors: Vec<RawTensor>,
    nodes: Vec<RawNode>,
    outputs: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    id: usize,
    size: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    name: String,
    elem: ElemType,
    shape: Vec<Value>,
    layout: RawLayout,
    group: usize,
    #[serde(default)]
    init: Option<InitSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    kind: String,
    #[serde(default)]
    dim: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: serde_json::Map<String, Value>,
    #[serde(default)]
    inputs: Vec<String>,
}

fn extent(v: &Value, b: &Bindings) -> Result<usize, JsonError> {
    match v {
        Value::Number(n) => match n.as_u64() {
            Some(x) => Ok(x as usize),
            None => schema(format!("extent {n} is not a non-negative integer")),
        },
        Value::String(s) => {
            let mut product = 1usize;
            for factor in s.split('*').map(str::trim) {
                product *= match factor.parse::<usize>() {
                    Ok(x) => x,
                    Err(_) => match b.sizes.get(factor) {
                        Some(&x) => x,
                        None => return schema(format!("unbound size symbol {factor}")),
                    },
                };
            }
            Ok(product)
        }
        other => schema(format!("invalid extent {other}")),
    }
}

/// Stable 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Default mask key of the `occurrence`-th dropout written in node `id`.
pub fn dropout_key(id: &str, occurrence: u64) -> u64 {
    fnv1a(format!("{id}#{occurrence}").as_bytes())
}

struct Resolver<'a> {
    nodes: &'a HashSet<String>,
}

impl Resolver<'_> {
    fn operand(&self, mut o: Operand) -> Operand {
        if let Source::Tensor(name) = &o.source {
            if self.nodes.contains(name) {
                o.source = Source::Node(name.clone());
            }
        }
        o
    }

    fn expr(&self, e: &mut Expr, members: &HashSet<String>) {
        e.visit_mut(&mut |x| {
            let replacement = match x {
                Expr::Operand(o) => match &o.source {
                    Source::Tensor(name) if o.slice.is_none() && members.contains(name) => Expr::Member(name.clone()),
                    _ => Expr::Operand(self.operand(o.clone())),
                },
                _ => return,
            };
            *x = replacement;
        });
    }
}

fn attr_str<'a>(attrs: &'a serde_json::Map<String, Value>, key: &str, node: &str) -> Result<&'a str, JsonError> {
    match attrs.get(key) {
        Some(Value::String(s)) => Ok(s),
        _ => schema(format!("node {node}: attribute '{key}' must be a string")),
    }
}

fn attr_reducer(attrs: &serde_json::Map<String, Value>, node: &str) -> Result<Reducer, JsonError> {
    match attrs.get("reducer") {
        None => Ok(Reducer::Sum),
        Some(Value::String(s)) => Reducer::parse(s).map_or_else(|| schema(format!("node {node}: unknown reducer {s}")), Ok),
        Some(_) => schema(format!("node {node}: reducer must be a string")),
    }
}

fn attr_usize(attrs: &serde_json::Map<String, Value>, key: &str) -> Option<usize> {
    attrs.get(key).and_then(Value::as_u64).map(|x| x as usize)
}

fn attr_opt_str(attrs: &serde_json::Map<String, Value>, key: &str) -> Option<String> {
    attrs.get(key).and_then(Value::as_str).map(str::to_string)
}

fn peer(attrs: &serde_json::Map<String, Value>, key: &str, node: &str) -> Result<PeerSpec, JsonError> {
    let s = attr_str(attrs, key, node)?;
    PeerSpec::parse(s).map_or_else(|| schema(format!("node {node}: cannot parse peer {s}")), Ok)
}

fn build_node(raw: &RawNode, r: &Resolver) -> Result<OpNode, JsonError> {
    let id = raw.id.as_str();
    let mut occurrence = 0u64;
    let mut next_key = || {
        let k = dropout_key(id, occurrence);
        occurrence += 1;
        k
    };
    let no_members = HashSet::new();
    let mut parse = |s: &str, members: &HashSet<String>, key: &mut dyn FnMut() -> u64| -> Result<Expr, JsonError> {
        let mut e = parse_expr(s, key).map_err(|e| JsonError::Schema(format!("node {id}: {e}")))?;
        r.expr(&mut e, members);
        Ok(e)
    };
    let input = |i: usize| -> Result<Operand, JsonError> {
        let Some(s) = raw.inputs.get(i) else {
            return schema(format!("node {id}: missing input {i}"));
        };
        match parse_expr(s, &mut || 0) {
            Ok(Expr::Operand(o)) => Ok(r.operand(o)),
            _ => schema(format!("node {id}: input '{s}' is not a value reference")),
        }
    };
    let arity = |n: usize| -> Result<(), JsonError> {
        if raw.inputs.len() != n {
            return schema(format!("node {id}: {} expects {n} inputs, got {}", raw.kind, raw.inputs.len()));
        }
        Ok(())
    };
    let single = |e: Expr| Op::Compute(Kernel::single(id, e));
    let stmts = |key: &mut dyn FnMut() -> u64,
                 parse: &mut dyn FnMut(&str, &HashSet<String>, &mut dyn FnMut() -> u64) -> Result<Expr, JsonError>|
     -> Result<Kernel, JsonError> {
        let list = if let Some(Value::Array(list)) = raw.attrs.get("stmts") {
            list.clone()
        } else if let Some(Value::String(e)) = raw.attrs.get("expr") {
            vec![json!({ "name": id, "expr": e })]
        } else {
            return schema(format!("node {id}: expected 'stmts' or 'expr'"));
        };
        let mut members = HashSet::new();
        let mut out = Vec::new();
        for s in list {
            let name = s.get("name").and_then(Value::as_str).map(str::to_string);
            let text = s.get("expr").and_then(Value::as_str);
            let (Some(name), Some(text)) = (name, text) else {
                return schema(format!("node {id}: each statement needs a name and an expr"));
            };
            let expr = parse(text, &members, key)?;
            let update = s.get("update").and_then(Value::as_str).map(str::to_string);
            members.insert(name.clone());
            out.push(Stmt { name, expr, update });
        }
        if out.is_empty() {
            return schema(format!("node {id}: a kernel needs at least one statement"));
        }
        Ok(Kernel { stmts: out })
    };
    let attrs = &raw.attrs;
    let op = match raw.kind.as_str() {
        "matmul" => {
            arity(2)?;
            Op::MatMul { lhs: input(0)?, rhs: input(1)? }
        }
        "pointwise" => single(parse(attr_str(attrs, "expr", id)?, &no_members, &mut next_key)?),
        "dropout" => {
            arity(1)?;
            let rate = attrs.get("rate").and_then(Value::as_f64).unwrap_or(0.0) as f32;
            if !(0.0..1.0).contains(&rate) {
                return schema(format!("node {id}: dropout rate must lie in [0, 1)"));
            }
            single(Expr::Dropout { input: Box::new(Expr::Operand(input(0)?)), rate, key: next_key() })
        }
        "sqrt" => {
            arity(1)?;
            single(Expr::Unary(super::UnOp::Sqrt, Box::new(Expr::Operand(input(0)?))))
        }
        "pow" => {
            let base = Expr::Operand(input(0)?);
            let exponent = match (raw.inputs.len(), attrs.get("exponent").and_then(Value::as_f64)) {
                (2, _) => Expr::Operand(input(1)?),
                (1, Some(x)) => Expr::Const(x as f32),
                _ => return schema(format!("node {id}: pow needs two inputs or an 'exponent'")),
            };
            single(Expr::bin(super::BinOp::Pow, base, exponent))
        }
        "norm" => {
            arity(1)?;
            single(Expr::Norm(Box::new(Expr::Operand(input(0)?))))
        }
        "reduce_tensor" => {
            arity(1)?;
            single(Expr::Reduce(attr_reducer(attrs, id)?, Box::new(Expr::Operand(input(0)?))))
        }
        "update" => {
            let target = attr_str(attrs, "target", id)?.to_string();
            let expr = parse(attr_str(attrs, "expr", id)?, &no_members, &mut next_key)?;
            Op::Compute(Kernel { stmts: vec![Stmt { name: id.to_string(), expr, update: Some(target) }] })
        }
        "fused_computation" => Op::Compute(stmts(&mut next_key, &mut parse)?),
        "all_reduce" => {
            arity(1)?;
            Op::AllReduce { reducer: attr_reducer(attrs, id)?, input: input(0)? }
        }
        "reduce_scatter" => {
            arity(1)?;
            Op::ReduceScatter { reducer: attr_reducer(attrs, id)?, input: input(0)?, axis: attr_usize(attrs, "axis") }
        }
        "all_gather" => {
            arity(1)?;
            Op::AllGather { input: input(0)?, restores: attr_opt_str(attrs, "restores") }
        }
        "reduce" => {
            arity(1)?;
            Op::Reduce { reducer: attr_reducer(attrs, id)?, input: input(0)?, root: attr_usize(attrs, "root").unwrap_or(0) }
        }
        "broadcast" => {
            arity(1)?;
            Op::Broadcast {
                input: input(0)?,
                root: attr_usize(attrs, "root").unwrap_or(0),
                restores: attr_opt_str(attrs, "restores"),
            }
        }
        "send" => {
            arity(1)?;
            Op::Send { payload: Kernel::single(id, Expr::Operand(input(0)?)), dest: peer(attrs, "dest", id)? }
        }
        "fused_send" => Op::Send { payload: stmts(&mut next_key, &mut parse)?, dest: peer(attrs, "dest", id)? },
        "recv" => {
            arity(1)?;
            Op::Recv { input: input(0)?, src: peer(attrs, "src", id)? }
        }
        "fused_all_reduce" => {
            arity(1)?;
            Op::FusedAllReduce {
                reducer: attr_reducer(attrs, id)?,
                input: input(0)?,
                kernel: stmts(&mut next_key, &mut parse)?,
                axis: attr_usize(attrs, "axis"),
                restores: attr_opt_str(attrs, "restores"),
            }
        }
        "overlap" => {
            let members: Vec<String> = match attrs.get("members") {
                Some(Value::Array(m)) => m.iter().filter_map(Value::as_str).map(str::to_string).collect(),
                _ => raw.inputs.clone(),
            };
            Op::Overlap { members }
        }
        other => return schema(format!("node {id}: unknown kind {other}")),
    };
    Ok(OpNode::new(id, op))
}

/// Fills value information in topological order where inference succeeds;
/// failures are left for `validate_program` to report.
pub fn best_effort_infer(p: &mut Program) {
    for id in topo_order(p) {
        let node = p.node(&id).expect("ordered").clone();
        if let Ok((info, writes)) = infer_node(p, &node) {
            let n = p.node_mut(&id).expect("exists");
            n.info = info;
            n.writes = writes;
        }
    }
}

pub fn program_from_str(text: &str, b: &Bindings) -> Result<Program, JsonError> {
    program_from_value(serde_json::from_str(text)?, b)
}

pub fn program_from_value(v: Value, b: &Bindings) -> Result<Program, JsonError> {
    let raw: RawProgram = serde_json::from_value(v)?;
    let auto = raw.groups.iter().filter(|g| g.size.as_str() == Some("auto")).count();
    let fixed: usize = raw.groups.iter().filter_map(|g| g.size.as_u64()).map(|x| x as usize).sum();
    let mut groups = Vec::new();
    let mut first = 0;
    for g in &raw.groups {
        let size = match &g.size {
            Value::String(s) if s == "auto" => {
                let rest = b.ranks.saturating_sub(fixed);
                if !rest.is_multiple_of(auto) || rest == 0 {
                    return schema(format!("{} ranks cannot be shared equally by {auto} groups", b.ranks));
                }
                rest / auto
            }
            other => extent(other, b)?,
        };
        groups.push(ProcessGroup { id: g.id, size, first_rank: first });
        first += size;
    }
    let mut tensors = Vec::new();
    for t in raw.tensors {
        let shape = t.shape.iter().map(|e| extent(e, b)).collect::<Result<Vec<_>, _>>()?;
        let layout = match (t.layout.kind.as_str(), t.layout.dim) {
            ("Sliced", Some(d)) => Layout::Sliced(d),
            ("Replicated", None) => Layout::Replicated,
            ("Local", None) => Layout::Local,
            (k, d) => return schema(format!("tensor {}: invalid layout {k} {d:?}", t.name)),
        };
        tensors.push(TensorDecl { name: t.name, elem: t.elem, shape, layout, group: t.group, init: t.init });
    }
    let ids: HashSet<String> = raw.nodes.iter().map(|n| n.id.clone()).collect();
    let r = Resolver { nodes: &ids };
    let nodes = raw.nodes.iter().map(|n| build_node(n, &r)).collect::<Result<Vec<_>, _>>()?;
    let mut p = Program { name: raw.name, groups, tensors, nodes, outputs: raw.outputs };
    best_effort_infer(&mut p);
    Ok(p)
}

fn layout_json(l: Layout) -> Value {
    match l {
        Layout::Sliced(d) => json!({"kind": "Sliced", "dim": d}),
        Layout::Replicated => json!({"kind": "Replicated"}),
        Layout::Local => json!({"kind": "Local"}),
    }
}

fn stmts_json(k: &Kernel) -> Value {
    Value::Array(
        k.stmts
            .iter()
            .map(|s| {
                let mut m = serde_json::Map::new();
                m.insert("name".into(), json!(s.name));
                m.insert("expr".into(), json!(s.expr.to_string()));
                if let Some(t) = &s.update {
                    m.insert("update".into(), json!(t));
                }
                Value::Object(m)
            })
            .collect(),
    )
}

fn node_json(n: &OpNode) -> Value {
    let mut attrs = serde_json::Map::new();
    let mut inputs: Vec<String> = Vec::new();
    let kind = n.op.kind_name();
    match &n.op {
        Op::MatMul { lhs, rhs } => inputs = vec![lhs.to_string(), rhs.to_string()],
        Op::Compute(k) if k.stmts.len() == 1 => {
            attrs.insert("expr".into(), json!(k.stmts[0].expr.to_string()));
            if let Some(t) = &k.stmts[0].update {
                attrs.insert("target".into(), json!(t));
            }
        }
        Op::Compute(k) => {
            attrs.insert("stmts".into(), stmts_json(k));
        }
        Op::AllReduce { reducer, input } => {
            attrs.insert("reducer".into(), json!(reducer.symbol()));
            inputs.push(input.to_string());
        }
        Op::ReduceScatter { reducer, input, axis } => {
            attrs.insert("reducer".into(), json!(reducer.symbol()));
            if let Some(a) = axis {
                attrs.insert("axis".into(), json!(a));
            }
            inputs.push(input.to_string());
        }
        Op::AllGather { input, restores } => {
            if let Some(t) = restores {
                attrs.insert("restores".into(), json!(t));
            }
            inputs.push(input.to_string());
        }
        Op::Reduce { reducer, input, root } => {
            attrs.insert("reducer".into(), json!(reducer.symbol()));
            attrs.insert("root".into(), json!(root));
            inputs.push(input.to_string());
        }
        Op::Broadcast { input, root, restores } => {
            attrs.insert("root".into(), json!(root));
            if let Some(t) = restores {
                attrs.insert("restores".into(), json!(t));
            }
            inputs.push(input.to_string());
        }
        Op::Send { payload, dest } => {
            attrs.insert("dest".into(), json!(dest.to_string()));
            if payload.is_identity() {
                inputs.push(payload.stmts[0].expr.to_string());
            } else {
                attrs.insert("stmts".into(), stmts_json(payload));
            }
        }
        Op::Recv { input, src } => {
            attrs.insert("src".into(), json!(src.to_string()));
            inputs.push(input.to_string());
        }
        Op::FusedAllReduce { reducer, input, kernel, axis, restores } => {
            attrs.insert("reducer".into(), json!(reducer.symbol()));
            if let Some(a) = axis {
                attrs.insert("axis".into(), json!(a));
            }
            attrs.insert("stmts".into(), stmts_json(kernel));
            if let Some(t) = restores {
                attrs.insert("restores".into(), json!(t));
            }
            inputs.push(input.to_string());
        }
        Op::Overlap { members } => {
            attrs.insert("members".into(), json!(members));
        }
    }
    json!({"id": n.id, "kind": kind, "attrs": attrs, "inputs": inputs})
}

/// Canonical JSON for a program (nodes in topological order, concrete extents).
pub fn program_to_value(p: &Program) -> Value {
    let order = topo_order(p);
    let mut listed: Vec<&OpNode> = order.iter().filter_map(|id| p.node(id)).collect();
    for n in &p.nodes {
        if !order.contains(&n.id) {
            listed.push(n);
        }
    }
    json!({
        "name": p.name,
        "groups": p.groups.iter().map(|g| json!({"id": g.id, "size": g.size})).collect::<Vec<_>>(),
        "tensors": p.tensors.iter().map(|t| {
            let mut v = json!({
                "name": t.name,
                "elem": t.elem,
                "shape": t.shape,
                "layout": layout_json(t.layout),
                "group": t.group,
            });
            if let Some(init) = &t.init {
                v["init"] = serde_json::to_value(init).expect("serializable");
            }
            v
        }).collect::<Vec<_>>(),
        "nodes": listed.into_iter().map(node_json).collect::<Vec<_>>(),
        "outputs": p.outputs,
    })
}

pub fn program_to_string(p: &Program) -> String {
    serde_json::to_string_pretty(&program_to_value(p)).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{validate_program, Severity};

    const FIG2: &str = r#"{
      "name": "self_attention",
      "groups": [{"id": 0, "size": "auto"}],
      "tensors": [
        {"name": "w", "elem": "F16", "shape": ["H", "H"], "layout": {"kind": "Sliced", "dim": 0}, "group": 0},
        {"name": "b", "elem": "F16", "shape": ["H"], "layout": {"kind": "Replicated"}, "group": 0},
        {"name": "in", "elem": "F16", "shape": ["B", "S", "H"], "layout": {"kind": "Sliced", "dim": 2}, "group": 0},
        {"name": "r", "elem": "F16", "shape": ["B", "S", "H"], "layout": {"kind": "Replicated"}, "group": 0}
      ],
      "nodes": [
        {"id": "layer", "kind": "matmul", "inputs": ["in", "w"]},
        {"id": "sum", "kind": "all_reduce", "attrs": {"reducer": "+"}, "inputs": ["layer"]},
        {"id": "dropout", "kind": "pointwise", "attrs": {"expr": "dropout(sum + b, 0.1)"}},
        {"id": "out", "kind": "pointwise", "attrs": {"expr": "dropout + r"}}
      ],
      "outputs": ["out"]
    }"#;

    fn desk() -> Bindings {
        Bindings::new(4).with("B", 2).with("S", 4).with("H", 8)
    }

    #[test]
    fn loads_and_round_trips() {
        let p = program_from_str(FIG2, &desk()).unwrap();
        assert!(validate_program(&p).is_empty(), "{:?}", validate_program(&p));
        assert_eq!(p.node("layer").unwrap().info.layout, Layout::Local);
        let text = program_to_string(&p);
        let q = program_from_str(&text, &desk()).unwrap();
        assert_eq!(p.nodes.len(), q.nodes.len());
        for (a, b) in p.nodes.iter().zip(&q.nodes) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unbound_symbol_and_bad_kind_are_schema_errors() {
        assert!(matches!(program_from_str(FIG2, &Bindings::new(4)), Err(JsonError::Schema(_))));
        let bad = FIG2.replace("\"matmul\"", "\"conv\"");
        assert!(matches!(program_from_str(&bad, &desk()), Err(JsonError::Schema(_))));
        assert!(matches!(program_from_str("{", &desk()), Err(JsonError::Syntax(_))));
    }

    #[test]
    fn missing_output_is_a_diagnostic() {
        let text = FIG2.replace("\"outputs\": [\"out\"]", "\"outputs\": [\"gone\"]");
        let p = program_from_str(&text, &desk()).unwrap();
        let d = validate_program(&p);
        assert!(d.iter().any(|d| d.severity == Severity::Error && d.message.contains("gone")));
    }
}

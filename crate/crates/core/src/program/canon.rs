//! Id-independent structural hashing, used for DFG isomorphism checks and
//! search memoization.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::json::fnv1a;
use super::{topo_order, Expr, Kernel, Op, Operand, Program, Source};

fn operand_sig(o: &Operand, sigs: &BTreeMap<String, u64>) -> String {
    let base = match &o.source {
        Source::Tensor(t) => format!("T:{t}"),
        Source::Node(n) => format!("N:{:x}", sigs.get(n).copied().unwrap_or(0)),
        Source::Written { node, tensor } => format!("W:{:x}:{tensor}", sigs.get(node).copied().unwrap_or(0)),
    };
    match o.slice {
        Some(a) => format!("slice({base},{a})"),
        None => base,
    }
}

fn expr_sig(e: &Expr, sigs: &BTreeMap<String, u64>, members: &BTreeMap<&str, usize>, out: &mut String) {
    match e {
        Expr::Const(c) => write!(out, "c{:08x}", c.to_bits()).unwrap(),
        Expr::Operand(o) => out.push_str(&operand_sig(o, sigs)),
        Expr::Member(m) => write!(out, "m{}", members.get(m.as_str()).copied().unwrap_or(usize::MAX)).unwrap(),
        Expr::InFlight => out.push('$'),
        Expr::Unary(op, a) => {
            write!(out, "{op:?}(").unwrap();
            expr_sig(a, sigs, members, out);
            out.push(')');
        }
        Expr::Binary(op, a, b) => {
            write!(out, "{op:?}(").unwrap();
            expr_sig(a, sigs, members, out);
            out.push(',');
            expr_sig(b, sigs, members, out);
            out.push(')');
        }
        Expr::Dropout { input, rate, key } => {
            write!(out, "drop{:08x}:{key:x}(", rate.to_bits()).unwrap();
            expr_sig(input, sigs, members, out);
            out.push(')');
        }
        Expr::Norm(a) => {
            out.push_str("norm(");
            expr_sig(a, sigs, members, out);
            out.push(')');
        }
        Expr::Reduce(r, a) => {
            write!(out, "red{r:?}(").unwrap();
            expr_sig(a, sigs, members, out);
            out.push(')');
        }
    }
}

fn kernel_sig(k: &Kernel, sigs: &BTreeMap<String, u64>) -> String {
    let members: BTreeMap<&str, usize> = k.stmts.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let mut out = String::new();
    for s in &k.stmts {
        out.push('[');
        expr_sig(&s.expr, sigs, &members, &mut out);
        if let Some(t) = &s.update {
            write!(out, "->{t}").unwrap();
        }
        out.push(']');
    }
    out
}

/// Structural signature of every node, computed bottom-up.
pub fn node_signatures(p: &Program) -> BTreeMap<String, u64> {
    let mut sigs = BTreeMap::new();
    for id in topo_order(p) {
        let n = p.node(&id).expect("ordered");
        let body = match &n.op {
            Op::MatMul { lhs, rhs } => format!("matmul({},{})", operand_sig(lhs, &sigs), operand_sig(rhs, &sigs)),
            Op::Compute(k) => format!("compute{}", kernel_sig(k, &sigs)),
            Op::AllReduce { reducer, input } => format!("ar{reducer:?}({})", operand_sig(input, &sigs)),
            Op::ReduceScatter { reducer, input, axis } => {
                format!("rs{reducer:?}{axis:?}({})", operand_sig(input, &sigs))
            }
            Op::AllGather { input, restores } => format!("ag{restores:?}({})", operand_sig(input, &sigs)),
            Op::Reduce { reducer, input, root } => format!("reduce{reducer:?}{root}({})", operand_sig(input, &sigs)),
            Op::Broadcast { input, root, restores } => {
                format!("bc{root}{restores:?}({})", operand_sig(input, &sigs))
            }
            Op::Send { payload, dest } => format!("send{}{}", dest.group_offset, kernel_sig(payload, &sigs)),
            Op::Recv { input, src } => format!("recv{}({})", src.group_offset, operand_sig(input, &sigs)),
            Op::FusedAllReduce { reducer, input, kernel, axis, restores } => format!(
                "far{reducer:?}{axis:?}{restores:?}({}){}",
                operand_sig(input, &sigs),
                kernel_sig(kernel, &sigs)
            ),
            Op::Overlap { members } => {
                let m: Vec<String> =
                    members.iter().map(|m| format!("{:x}", sigs.get(m).copied().unwrap_or(0))).collect();
                format!("overlap({})", m.join(","))
            }
        };
        sigs.insert(id, fnv1a(body.as_bytes()));
    }
    sigs
}

/// Hash identifying a program up to renaming of node ids: node structure,
/// edges, tensor declarations and outputs.
pub fn canonical_form(p: &Program) -> u64 {
    let sigs = node_signatures(p);
    let mut nodes: Vec<u64> = sigs.values().copied().collect();
    nodes.sort_unstable();
    let mut text = String::new();
    for t in &p.tensors {
        write!(text, "{}:{:?}:{:?}:{}:{};", t.name, t.elem, t.shape, t.layout, t.group).unwrap();
    }
    for n in nodes {
        write!(text, "{n:x},").unwrap();
    }
    text.push('|');
    for o in &p.outputs {
        write!(text, "{:x},", sigs.get(o).copied().unwrap_or(0)).unwrap();
    }
    fnv1a(text.as_bytes())
}

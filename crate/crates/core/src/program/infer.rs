//! Layout and shape inference.

use std::collections::HashMap;

use super::{ElemType, Expr, Kernel, Layout, Op, OpNode, Operand, Program, Shape, Source, ValueInfo};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("divisibility: {0}")]
    Divisibility(String),
    #[error("group mismatch: {0}")]
    GroupMismatch(String),
    #[error("unknown reference: {0}")]
    UnknownReference(String),
    #[error("no such group: {0}")]
    NoSuchGroup(String),
}

/// Operation families that share a layout rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutRule {
    MatMul,
    Pointwise,
    /// Whole-tensor reduction to a scalar.
    Reduction,
    AllReduce,
    ReduceScatter(Option<usize>),
    AllGather,
    Reduce,
    Broadcast,
    PointToPoint,
}

/// Trailing-aligned broadcast of two shapes; extent-1 axes stretch.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Shape> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let x = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let y = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

/// Output layout and shape of an operation from its input layouts and shapes.
pub fn infer_layout(
    rule: LayoutRule,
    inputs: &[(Layout, &[usize])],
    group_size: usize,
) -> Result<(Layout, Shape), LayoutError> {
    let arity = match rule {
        LayoutRule::MatMul => Some(2),
        LayoutRule::Pointwise => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if inputs.len() != n {
            return Err(LayoutError::InvalidInput(format!("expected {n} inputs, got {}", inputs.len())));
        }
    }
    let divisible = |layout: Layout, shape: &[usize]| -> Result<(), LayoutError> {
        if let Layout::Sliced(d) = layout {
            if d >= shape.len() {
                return Err(LayoutError::InvalidInput(format!("slice axis {d} out of range for {}", shape_str(shape))));
            }
            if !shape[d].is_multiple_of(group_size) {
                return Err(LayoutError::Divisibility(format!(
                    "axis {d} of {} is not divisible by {group_size} ranks",
                    shape_str(shape)
                )));
            }
        }
        Ok(())
    };
    match rule {
        LayoutRule::MatMul => {
            let ((la, sa), (lb, sb)) = ((inputs[0].0, inputs[0].1), (inputs[1].0, inputs[1].1));
            if sa.len() < 2 || sb.len() != 2 {
                return Err(LayoutError::ShapeMismatch(format!(
                    "matmul needs a [..,M,K] lhs and a [K,N] rhs, got {} and {}",
                    shape_str(sa),
                    shape_str(sb)
                )));
            }
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(LayoutError::ShapeMismatch(format!(
                    "contraction extents differ: {} vs {}",
                    shape_str(sa),
                    shape_str(sb)
                )));
            }
            let mut out: Shape = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            let last = sa.len() - 1;
            let layout = match (la, lb) {
                (Layout::Sliced(a), Layout::Sliced(0)) if a == last => Layout::Local,
                (Layout::Replicated, Layout::Replicated) => Layout::Replicated,
                (Layout::Local, Layout::Local | Layout::Replicated) | (Layout::Replicated, Layout::Local) => {
                    Layout::Local
                }
                (Layout::Replicated, Layout::Sliced(1)) => Layout::Sliced(out.len() - 1),
                (Layout::Sliced(d), Layout::Replicated) if d < last => Layout::Sliced(d),
                _ => {
                    return Err(LayoutError::LayoutMismatch(format!("matmul of {la} and {lb}")));
                }
            };
            divisible(layout, &out)?;
            Ok((layout, out))
        }
        LayoutRule::Pointwise => pointwise(inputs),
        LayoutRule::Reduction => {
            let layout = match inputs[0].0 {
                Layout::Local => Layout::Local,
                Layout::Sliced(_) | Layout::Replicated => Layout::Replicated,
            };
            Ok((layout, Vec::new()))
        }
        LayoutRule::AllReduce => match inputs[0].0 {
            Layout::Local | Layout::Replicated => Ok((Layout::Replicated, inputs[0].1.to_vec())),
            l => Err(LayoutError::InvalidInput(format!("all_reduce of a {l} tensor"))),
        },
        LayoutRule::ReduceScatter(axis) => {
            let (l, s) = inputs[0];
            if !matches!(l, Layout::Local | Layout::Replicated) {
                return Err(LayoutError::InvalidInput(format!("reduce_scatter of a {l} tensor")));
            }
            if s.is_empty() {
                return Err(LayoutError::InvalidInput("reduce_scatter of a scalar".into()));
            }
            let layout = Layout::Sliced(axis.unwrap_or(s.len() - 1));
            divisible(layout, s)?;
            Ok((layout, s.to_vec()))
        }
        LayoutRule::AllGather => match inputs[0].0 {
            Layout::Sliced(_) => Ok((Layout::Replicated, inputs[0].1.to_vec())),
            l => Err(LayoutError::InvalidInput(format!("all_gather of a {l} tensor"))),
        },
        LayoutRule::Reduce => match inputs[0].0 {
            Layout::Local | Layout::Replicated => Ok((Layout::Local, inputs[0].1.to_vec())),
            l => Err(LayoutError::InvalidInput(format!("reduce of a {l} tensor"))),
        },
        LayoutRule::Broadcast => match inputs[0].0 {
            Layout::Local | Layout::Replicated => Ok((Layout::Replicated, inputs[0].1.to_vec())),
            l => Err(LayoutError::InvalidInput(format!("broadcast of a {l} tensor"))),
        },
        LayoutRule::PointToPoint => {
            let (l, s) = inputs[0];
            divisible(l, s)?;
            Ok((l, s.to_vec()))
        }
    }
}

fn pointwise(inputs: &[(Layout, &[usize])]) -> Result<(Layout, Shape), LayoutError> {
    let mut sliced: Option<(usize, usize)> = None;
    let mut local = false;
    for &(l, s) in inputs {
        match l {
            Layout::Sliced(d) => {
                if let Some((d0, r0)) = sliced {
                    if d0 != d || r0 != s.len() {
                        return Err(LayoutError::LayoutMismatch(format!(
                            "Sliced({d0}) of rank {r0} combined with Sliced({d}) of rank {}",
                            s.len()
                        )));
                    }
                }
                sliced = Some((d, s.len()));
            }
            Layout::Local => local = true,
            Layout::Replicated => {}
        }
    }
    if local && sliced.is_some() {
        return Err(LayoutError::LayoutMismatch("Local combined with Sliced".into()));
    }
    let mut shape: Shape = Vec::new();
    for &(_, s) in inputs {
        shape = broadcast_shapes(&shape, s).ok_or_else(|| {
            LayoutError::ShapeMismatch(format!("cannot broadcast {} with {}", shape_str(&shape), shape_str(s)))
        })?;
    }
    let layout = match sliced {
        Some((d, r)) => {
            let axis = d + shape.len() - r;
            let extent = inputs.iter().find(|(l, _)| matches!(l, Layout::Sliced(_))).map(|(_, s)| s[d]).unwrap_or(1);
            if extent != shape[axis] {
                return Err(LayoutError::ShapeMismatch("a sliced operand cannot be stretched along its slice axis".into()));
            }
            Layout::Sliced(axis)
        }
        None if local => Layout::Local,
        None => Layout::Replicated,
    };
    Ok((layout, shape))
}

/// Inferred value of one kernel statement; `body` describes the
/// element-wise part (differs from `value` only for reductions).
#[derive(Debug, Clone, PartialEq)]
pub struct StmtInfo {
    pub value: ValueInfo,
    pub body: ValueInfo,
}

fn widest(elems: &[(ElemType, bool)]) -> ElemType {
    let non_scalar: Vec<ElemType> = elems.iter().filter(|(_, s)| !s).map(|(e, _)| *e).collect();
    let pool = if non_scalar.is_empty() { elems.iter().map(|(e, _)| *e).collect() } else { non_scalar };
    pool.into_iter().fold(ElemType::F16, ElemType::widest)
}

fn resolve(p: &Program, op: &Operand) -> Result<ValueInfo, LayoutError> {
    let info = p.operand_info(op).ok_or_else(|| LayoutError::UnknownReference(op.to_string()))?;
    if let Some(axis) = op.slice {
        let base = Operand { source: op.source.clone(), slice: None };
        let base_info = p.operand_info(&base).expect("resolved above");
        if base_info.layout != Layout::Replicated {
            return Err(LayoutError::InvalidInput(format!("slice view of a {} value {base}", base_info.layout)));
        }
        if axis >= info.shape.len() {
            return Err(LayoutError::InvalidInput(format!("slice axis {axis} out of range for {op}")));
        }
    }
    Ok(info)
}

/// Infers every statement of a kernel. `in_flight` is the value of `$`.
pub fn kernel_infos(p: &Program, k: &Kernel, in_flight: Option<&ValueInfo>) -> Result<Vec<StmtInfo>, LayoutError> {
    let mut members: HashMap<&str, ValueInfo> = HashMap::new();
    let mut out = Vec::with_capacity(k.stmts.len());
    for s in &k.stmts {
        let mut leaves: Vec<ValueInfo> = Vec::new();
        let mut err = None;
        s.expr.elementwise_body().visit(&mut |e| {
            let info = match e {
                Expr::Operand(o) => resolve(p, o),
                Expr::Member(m) => {
                    members.get(m.as_str()).cloned().ok_or_else(|| LayoutError::UnknownReference(m.clone()))
                }
                Expr::InFlight => {
                    in_flight.cloned().ok_or_else(|| LayoutError::InvalidInput("'$' outside a fused collective".into()))
                }
                Expr::Norm(_) | Expr::Reduce(..) => {
                    Err(LayoutError::InvalidInput(format!("reduction nested inside statement {}", s.name)))
                }
                _ => return,
            };
            match info {
                Ok(i) => leaves.push(i),
                Err(e) => err = err.take().or(Some(e)),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let group = leaves.first().map_or(0, |l| l.group);
        if let Some(bad) = leaves.iter().find(|l| l.group != group) {
            return Err(LayoutError::GroupMismatch(format!(
                "statement {} mixes groups {group} and {}",
                s.name, bad.group
            )));
        }
        let group_size = p.group(group).map_or(1, |g| g.size);
        let ins: Vec<(Layout, &[usize])> = leaves.iter().map(|l| (l.layout, l.shape.as_slice())).collect();
        let (layout, shape) = infer_layout(LayoutRule::Pointwise, &ins, group_size)?;
        let elem = widest(&leaves.iter().map(|l| (l.elem, l.shape.is_empty())).collect::<Vec<_>>());
        let body = ValueInfo { shape, layout, elem, group };
        let mut value = if s.expr.is_reduction() {
            let (layout, shape) = infer_layout(LayoutRule::Reduction, &[(body.layout, &body.shape)], group_size)?;
            ValueInfo { shape, layout, elem: body.elem, group }
        } else {
            body.clone()
        };
        if let Some(t) = &s.update {
            let decl = p.tensor(t).ok_or_else(|| LayoutError::UnknownReference(t.clone()))?;
            if decl.shape != value.shape {
                return Err(LayoutError::ShapeMismatch(format!(
                    "update of {t} {} with a value of shape {}",
                    shape_str(&decl.shape),
                    shape_str(&value.shape)
                )));
            }
            if decl.group != group && !leaves.is_empty() {
                return Err(LayoutError::GroupMismatch(format!("update of {t} from group {group}")));
            }
            value.elem = decl.elem;
            value.group = decl.group;
        }
        members.insert(&s.name, value.clone());
        out.push(StmtInfo { value, body });
    }
    Ok(out)
}

fn writes_of_kernel(k: &Kernel, infos: &[StmtInfo]) -> Vec<(String, ValueInfo)> {
    k.stmts
        .iter()
        .zip(infos)
        .filter_map(|(s, i)| s.update.clone().map(|t| (t, i.value.clone())))
        .collect()
}

fn single_input(p: &Program, op: &Operand) -> Result<ValueInfo, LayoutError> {
    resolve(p, op)
}

fn group_size(p: &Program, group: usize) -> Result<usize, LayoutError> {
    p.group(group).map(|g| g.size).ok_or_else(|| LayoutError::NoSuchGroup(format!("group {group}")))
}

/// Infers the value information and writes of one node against the
/// (already inferred) nodes of `p`.
pub fn infer_node(p: &Program, node: &OpNode) -> Result<(ValueInfo, Vec<(String, ValueInfo)>), LayoutError> {
    let simple = |rule: LayoutRule, input: &Operand| -> Result<ValueInfo, LayoutError> {
        let i = single_input(p, input)?;
        let (layout, shape) = infer_layout(rule, &[(i.layout, &i.shape)], group_size(p, i.group)?)?;
        Ok(ValueInfo { shape, layout, elem: i.elem, group: i.group })
    };
    let restore = |t: &Option<String>, info: &ValueInfo| -> Result<Vec<(String, ValueInfo)>, LayoutError> {
        match t {
            None => Ok(Vec::new()),
            Some(t) => {
                let decl = p.tensor(t).ok_or_else(|| LayoutError::UnknownReference(t.clone()))?;
                if decl.shape != info.shape || decl.group != info.group {
                    return Err(LayoutError::ShapeMismatch(format!("restored value does not fit tensor {t}")));
                }
                let mut w = info.clone();
                w.elem = decl.elem;
                Ok(vec![(t.clone(), w)])
            }
        }
    };
    match &node.op {
        Op::MatMul { lhs, rhs } => {
            let a = single_input(p, lhs)?;
            let b = single_input(p, rhs)?;
            if a.group != b.group {
                return Err(LayoutError::GroupMismatch(format!("matmul {} mixes groups", node.id)));
            }
            let (layout, shape) =
                infer_layout(LayoutRule::MatMul, &[(a.layout, &a.shape), (b.layout, &b.shape)], group_size(p, a.group)?)?;
            Ok((ValueInfo { shape, layout, elem: a.elem.widest(b.elem), group: a.group }, Vec::new()))
        }
        Op::Compute(k) => {
            if k.uses_in_flight() {
                return Err(LayoutError::InvalidInput("'$' outside a fused collective".into()));
            }
            let infos = kernel_infos(p, k, None)?;
            Ok((infos.last().expect("non-empty kernel").value.clone(), writes_of_kernel(k, &infos)))
        }
        Op::AllReduce { input, .. } => Ok((simple(LayoutRule::AllReduce, input)?, Vec::new())),
        Op::ReduceScatter { input, axis, .. } => Ok((simple(LayoutRule::ReduceScatter(*axis), input)?, Vec::new())),
        Op::AllGather { input, restores } => {
            let info = simple(LayoutRule::AllGather, input)?;
            let w = restore(restores, &info)?;
            Ok((info, w))
        }
        Op::Reduce { input, root, .. } => {
            let info = simple(LayoutRule::Reduce, input)?;
            if *root >= group_size(p, info.group)? {
                return Err(LayoutError::InvalidInput(format!("root {root} outside group {}", info.group)));
            }
            Ok((info, Vec::new()))
        }
        Op::Broadcast { input, root, restores } => {
            let info = simple(LayoutRule::Broadcast, input)?;
            if *root >= group_size(p, info.group)? {
                return Err(LayoutError::InvalidInput(format!("root {root} outside group {}", info.group)));
            }
            let w = restore(restores, &info)?;
            Ok((info, w))
        }
        Op::Send { payload, dest } => {
            if payload.uses_in_flight() || payload.has_reduction() || !payload.updates().is_empty() {
                return Err(LayoutError::InvalidInput("send payload must be element-wise without updates".into()));
            }
            let infos = kernel_infos(p, payload, None)?;
            let v = infos.last().expect("non-empty kernel").value.clone();
            let target = dest
                .target_group(v.group, p.groups.len())
                .ok_or_else(|| LayoutError::NoSuchGroup(format!("{dest} from group {}", v.group)))?;
            let (src_size, dst_size) = (group_size(p, v.group)?, group_size(p, target)?);
            if src_size != dst_size {
                return Err(LayoutError::InvalidInput(format!(
                    "send between groups of sizes {src_size} and {dst_size}"
                )));
            }
            let (layout, shape) = infer_layout(LayoutRule::PointToPoint, &[(v.layout, &v.shape)], dst_size)?;
            Ok((ValueInfo { shape, layout, elem: v.elem, group: target }, Vec::new()))
        }
        Op::Recv { input, src } => {
            let sender = match &input.source {
                Source::Node(n) => p.node(n),
                _ => None,
            };
            let Some(OpNode { op: Op::Send { dest, .. }, .. }) = sender else {
                return Err(LayoutError::InvalidInput(format!("recv {} is not paired with a send", node.id)));
            };
            if dest.group_offset != -src.group_offset {
                return Err(LayoutError::InvalidInput(format!(
                    "recv {} expects {src} but the send targets {dest}",
                    node.id
                )));
            }
            Ok((single_input(p, input)?, Vec::new()))
        }
        Op::FusedAllReduce { input, kernel, axis, restores, .. } => {
            let inflight = simple(LayoutRule::ReduceScatter(*axis), input)?;
            let infos = kernel_infos(p, kernel, Some(&inflight))?;
            let primary = &infos.last().expect("non-empty kernel").value;
            if primary.layout != inflight.layout || primary.shape != inflight.shape {
                return Err(LayoutError::LayoutMismatch(format!(
                    "fused computation yields {} {:?}, expected the in-flight {} {:?}",
                    primary.layout, primary.shape, inflight.layout, inflight.shape
                )));
            }
            let out = ValueInfo { shape: primary.shape.clone(), layout: Layout::Replicated, elem: primary.elem, group: primary.group };
            let mut writes = writes_of_kernel(kernel, &infos);
            writes.retain(|(t, _)| Some(t) != restores.as_ref());
            writes.extend(restore(restores, &out)?);
            Ok((out, writes))
        }
        Op::Overlap { members } => {
            let last = members.last().ok_or_else(|| LayoutError::InvalidInput("empty overlap group".into()))?;
            let n = p.node(last).ok_or_else(|| LayoutError::UnknownReference(last.clone()))?;
            Ok((n.info.clone(), Vec::new()))
        }
    }
}

/// Re-infers every node in topological order, returning a program whose
/// stored infos equal inference results.
pub fn infer_program(p: &Program) -> Result<Program, (String, LayoutError)> {
    let mut out = p.clone();
    for id in super::topo_order(p) {
        let node = out.node(&id).expect("topo order lists existing nodes").clone();
        let (info, writes) = infer_node(&out, &node).map_err(|e| (id.clone(), e))?;
        let n = out.node_mut(&id).expect("exists");
        n.info = info;
        n.writes = writes;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_two_sliced_is_local() {
        let (l, s) = infer_layout(
            LayoutRule::MatMul,
            &[(Layout::Sliced(2), &[2, 4, 8]), (Layout::Sliced(0), &[8, 8])],
            4,
        )
        .unwrap();
        assert_eq!((l, s), (Layout::Local, vec![2, 4, 8]));
    }

    #[test]
    fn collectives() {
        let s: &[usize] = &[2, 4, 8];
        assert_eq!(infer_layout(LayoutRule::AllReduce, &[(Layout::Local, s)], 4).unwrap().0, Layout::Replicated);
        assert_eq!(
            infer_layout(LayoutRule::ReduceScatter(None), &[(Layout::Local, s)], 4).unwrap().0,
            Layout::Sliced(2)
        );
        assert!(matches!(
            infer_layout(LayoutRule::ReduceScatter(Some(0)), &[(Layout::Local, s)], 4),
            Err(LayoutError::Divisibility(_))
        ));
        assert!(matches!(
            infer_layout(LayoutRule::AllGather, &[(Layout::Replicated, s)], 4),
            Err(LayoutError::InvalidInput(_))
        ));
        assert_eq!(infer_layout(LayoutRule::Reduce, &[(Layout::Local, s)], 4).unwrap().0, Layout::Local);
    }

    #[test]
    fn pointwise_rules() {
        let r = |s: &'static [usize]| (Layout::Replicated, s);
        assert_eq!(
            infer_layout(LayoutRule::Pointwise, &[r(&[4]), r(&[])], 4).unwrap(),
            (Layout::Replicated, vec![4])
        );
        assert!(matches!(
            infer_layout(LayoutRule::Pointwise, &[(Layout::Sliced(0), &[8]), (Layout::Sliced(1), &[8, 2])], 4),
            Err(LayoutError::LayoutMismatch(_))
        ));
        assert_eq!(
            infer_layout(LayoutRule::Pointwise, &[(Layout::Sliced(2), &[2, 4, 8]), r(&[8])], 4).unwrap(),
            (Layout::Sliced(2), vec![2, 4, 8])
        );
        assert!(matches!(
            infer_layout(LayoutRule::Pointwise, &[r(&[3]), r(&[4])], 4),
            Err(LayoutError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn broadcast_is_trailing_aligned() {
        assert_eq!(broadcast_shapes(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shapes(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
    }
}

//! Sequential reference interpreter.
//!
//! Evaluates a program on logical (global) values with no communication at
//! all: collectives become plain reductions over ranks taken in rank order.

use std::collections::HashMap;

use thiserror::Error;

use crate::eval::{eval_elementwise, gather, matmul_elem, Col, ReduceKind, Region, StmtCtx, ValueRef};
use crate::inputs::LogicalInputs;
use crate::program::{
    has_errors, kernel_infos, topo_order, validate_program, Expr, Kernel, Layout, Op, Program, Reducer, Source,
    ValueInfo,
};
use crate::value::{Logical, Tensor};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("missing input tensor {0}")]
    MissingInput(String),
}

/// Program outputs (in declaration order) and final values of written tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Results {
    pub outputs: Vec<(String, Logical)>,
    pub state: Vec<(String, Logical)>,
}

impl Results {
    /// Largest deviation over outputs (matched by position) and final
    /// tensor states (matched by name).
    pub fn deviation_from(&self, other: &Results) -> f64 {
        if self.outputs.len() != other.outputs.len() || self.state.len() != other.state.len() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.outputs.iter().zip(&other.outputs) {
            worst = worst.max(crate::value::logical_deviation(a, b));
        }
        for (name, a) in &self.state {
            match other.state.iter().find(|(n, _)| n == name) {
                Some((_, b)) => worst = worst.max(crate::value::logical_deviation(a, b)),
                None => return f64::INFINITY,
            }
        }
        worst
    }
}

type State = HashMap<Source, Logical>;

fn lookup<'s>(state: &'s State, src: &Source) -> Result<&'s Logical, OracleError> {
    state.get(src).ok_or_else(|| OracleError::Invalid(format!("value {src:?} is not available")))
}

fn combine(reducer: Reducer, parts: &[&Tensor]) -> Tensor {
    let mut acc = parts[0].clone();
    for t in &parts[1..] {
        for (a, &b) in acc.data.iter_mut().zip(&t.data) {
            *a = reducer.apply(*a, b);
        }
    }
    acc
}

/// Reduction over the ranks of a group, in rank order.
fn rank_reduce(reducer: Reducer, v: &Logical, size: usize) -> Tensor {
    match v {
        Logical::PerRank(ts) => combine(reducer, &ts.iter().collect::<Vec<_>>()),
        Logical::Global(t) => combine(reducer, &vec![t; size]),
    }
}

fn leaf_value<'s>(
    e: &Expr,
    r: usize,
    state: &'s State,
    members: &'s HashMap<String, Logical>,
    in_flight: Option<&'s Logical>,
) -> &'s Tensor {
    let v = match e {
        Expr::Operand(o) => state.get(&o.source).expect("checked by validation"),
        Expr::Member(m) => &members[m],
        Expr::InFlight => in_flight.expect("checked by validation"),
        _ => unreachable!("not a leaf"),
    };
    v.at(r)
}

/// Evaluates every statement of a kernel; returns one value per statement.
pub(crate) fn eval_kernel(
    p: &Program,
    k: &Kernel,
    state: &State,
    in_flight: Option<(&ValueInfo, &Logical)>,
    seed: u64,
) -> Result<Vec<Logical>, OracleError> {
    let infos = kernel_infos(p, k, in_flight.map(|(i, _)| i)).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let mut members: HashMap<String, Logical> = HashMap::new();
    let mut out = Vec::with_capacity(k.stmts.len());
    for (s, info) in k.stmts.iter().zip(&infos) {
        let body = &info.body;
        let ranks = if body.layout == Layout::Local { p.group(body.group).map_or(1, |g| g.size) } else { 1 };
        let region = Region::full(&body.shape);
        let mut per_rank = crate::par::map_range(ranks, |r| {
            let leaf = |e: &Expr| -> Col<'_> {
                let t = leaf_value(e, r, state, &members, in_flight.map(|(_, v)| v));
                gather(ValueRef { region: &Region::full(&t.shape), data: &t.data }, &region)
            };
            let ctx = StmtCtx { region: &region, seed, leaf: &leaf };
            match ReduceKind::of(&s.expr) {
                Some((kind, b)) => {
                    let xs = eval_elementwise(b, &ctx);
                    Tensor::scalar(kind.finish(kind.partial(&xs)))
                }
                None => Tensor::new(body.shape.clone(), eval_elementwise(&s.expr, &ctx)),
            }
        });
        let v = if body.layout == Layout::Local { Logical::PerRank(per_rank) } else { Logical::Global(per_rank.remove(0)) };
        members.insert(s.name.clone(), v.clone());
        out.push(v);
    }
    Ok(out)
}

fn matmul_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    let k = b.shape[0];
    let n = b.shape[1];
    let rows = a.data.len() / k.max(1);
    let mut shape = a.shape[..a.shape.len() - 1].to_vec();
    shape.push(n);
    let mut out = vec![0.0f32; rows * n];
    crate::par::for_each_row(&mut out, n, |r, row| {
        for (c, x) in row.iter_mut().enumerate() {
            *x = matmul_elem(&a.data, &b.data, k, n, r, c);
        }
    });
    Tensor::new(shape, out)
}

/// Runs `p` sequentially on logical inputs.
pub fn oracle_execute(p: &Program, inputs: &LogicalInputs, seed: u64) -> Result<Results, OracleError> {
    let diags = validate_program(p);
    if has_errors(&diags) {
        let first = diags.iter().find(|d| d.severity == crate::program::Severity::Error).expect("has errors");
        return Err(OracleError::Invalid(first.to_string()));
    }
    let mut state: State = HashMap::new();
    for d in &p.tensors {
        let v = inputs.get(&d.name).ok_or_else(|| OracleError::MissingInput(d.name.clone()))?;
        state.insert(Source::Tensor(d.name.clone()), v.clone());
    }
    for id in topo_order(p) {
        let node = p.node(&id).expect("ordered ids exist");
        let size = p.group(node.info.group).map_or(1, |g| g.size);
        let mut writes: Vec<(String, Logical)> = Vec::new();
        let value = match &node.op {
            Op::MatMul { lhs, rhs } => {
                let a = lookup(&state, &lhs.source)?;
                let b = lookup(&state, &rhs.source)?;
                let la = p.operand_info(lhs).expect("validated").layout;
                if node.info.layout == Layout::Local {
                    let last = node.info.shape.len() - 1;
                    let split = la == Layout::Sliced(last);
                    Logical::PerRank(crate::par::map_range(size, |r| {
                        if split {
                            matmul_tensors(&a.at(r).block(last, r, size), &b.at(r).block(0, r, size))
                        } else {
                            matmul_tensors(a.at(r), b.at(r))
                        }
                    }))
                } else {
                    Logical::Global(matmul_tensors(a.at(0), b.at(0)))
                }
            }
            Op::Compute(k) => {
                let vals = eval_kernel(p, k, &state, None, seed)?;
                for (s, v) in k.stmts.iter().zip(&vals) {
                    if let Some(t) = &s.update {
                        writes.push((t.clone(), v.clone()));
                    }
                }
                vals.last().expect("non-empty kernel").clone()
            }
            Op::AllReduce { reducer, input } | Op::ReduceScatter { reducer, input, .. } => {
                Logical::Global(rank_reduce(*reducer, lookup(&state, &input.source)?, size))
            }
            Op::AllGather { input, restores } => {
                let v = lookup(&state, &input.source)?.clone();
                if let Some(t) = restores {
                    writes.push((t.clone(), v.clone()));
                }
                v
            }
            Op::Reduce { reducer, input, root } => {
                let v = lookup(&state, &input.source)?;
                let total = rank_reduce(*reducer, v, size);
                Logical::PerRank((0..size).map(|r| if r == *root { total.clone() } else { v.at(r).clone() }).collect())
            }
            Op::Broadcast { input, root, restores } => {
                let v = Logical::Global(lookup(&state, &input.source)?.at(*root).clone());
                if let Some(t) = restores {
                    writes.push((t.clone(), v.clone()));
                }
                v
            }
            Op::Send { payload, .. } => {
                eval_kernel(p, payload, &state, None, seed)?.pop().expect("non-empty kernel")
            }
            Op::Recv { input, .. } => lookup(&state, &input.source)?.clone(),
            Op::FusedAllReduce { reducer, input, kernel, axis, restores } => {
                let reduced = Logical::Global(rank_reduce(*reducer, lookup(&state, &input.source)?, size));
                let in_info = p.operand_info(input).expect("validated");
                let axis = axis.unwrap_or(in_info.shape.len() - 1);
                let flight = ValueInfo { layout: Layout::Sliced(axis), ..in_info };
                let vals = eval_kernel(p, kernel, &state, Some((&flight, &reduced)), seed)?;
                let primary = vals.last().expect("non-empty kernel").clone();
                for (s, v) in kernel.stmts.iter().zip(&vals) {
                    if let Some(t) = &s.update {
                        if Some(t) != restores.as_ref() {
                            writes.push((t.clone(), v.clone()));
                        }
                    }
                }
                if let Some(t) = restores {
                    writes.push((t.clone(), primary.clone()));
                }
                primary
            }
            Op::Overlap { members } => {
                let last = members.last().expect("validated");
                lookup(&state, &Source::Node(last.clone()))?.clone()
            }
        };
        for (t, v) in writes {
            state.insert(Source::Written { node: id.clone(), tensor: t }, v);
        }
        state.insert(Source::Node(id.clone()), value);
    }
    let outputs = p
        .outputs
        .iter()
        .map(|o| Ok((o.clone(), lookup(&state, &Source::Node(o.clone()))?.clone())))
        .collect::<Result<_, OracleError>>()?;
    let final_state = p
        .final_writers()
        .into_iter()
        .map(|(t, w)| Ok((t.clone(), lookup(&state, &Source::Written { node: w, tensor: t })?.clone())))
        .collect::<Result<_, OracleError>>()?;
    Ok(Results { outputs, state: final_state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::generate;
    use crate::program::json::{program_from_str, Bindings};

    const AR: &str = r#"{"name":"t","groups":[{"id":0,"size":3}],
      "tensors":[{"name":"g","elem":"F32","shape":[4],"layout":{"kind":"Local"},"group":0,"init":{"int":[-5,5]}},
                 {"name":"c","elem":"F32","shape":[],"layout":{"kind":"Replicated"},"group":0,"init":{"const":2.0}}],
      "nodes":[{"id":"s","kind":"all_reduce","attrs":{"reducer":"+"},"inputs":["g"]},
               {"id":"y","kind":"pointwise","attrs":{"expr":"s * c"}},
               {"id":"n","kind":"norm","inputs":["y"]}],
      "outputs":["y","n"]}"#;

    #[test]
    fn all_reduce_sums_ranks_in_order() {
        let p = program_from_str(AR, &Bindings::new(3)).unwrap();
        let inputs = generate(&p, 9);
        let res = oracle_execute(&p, &inputs, 9).unwrap();
        let Logical::PerRank(g) = &inputs["g"] else { panic!() };
        let expect: Vec<f32> = (0..4).map(|i| 2.0 * (g[0].data[i] + g[1].data[i] + g[2].data[i])).collect();
        assert_eq!(res.outputs[0].1, Logical::Global(Tensor::new(vec![4], expect.clone())));
        let norm = expect.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert_eq!(res.outputs[1].1, Logical::Global(Tensor::scalar(norm)));
    }
}

//! Single-operation entry points: each builds a one-node program over
//! per-rank inputs and runs it on the simulator.

use std::collections::HashMap;

use serde_json::{json, Value};

use super::comm::{Counters, ExecMode};
use super::exec::{execute, RunReport};
use super::plan::plan;
use super::{CommConfig, RuntimeError};
use crate::inputs::RankInputs;
use crate::program::json::{program_from_value, Bindings};
use crate::program::{ElemType, Layout, Program, Reducer};
use crate::value::Tensor;

/// Result of one standalone collective.
#[derive(Debug, Clone)]
pub struct CollectiveRun {
    /// What each rank holds afterwards (local blocks for sliced results).
    pub outputs: Vec<Tensor>,
    pub counters: Vec<Counters>,
    pub report: RunReport,
}

/// Settings shared by the standalone collectives.
#[derive(Debug, Clone)]
pub struct Collective<'a> {
    pub cfg: &'a CommConfig,
    pub elem: ElemType,
    pub mode: ExecMode,
}

fn layout_json(l: Layout) -> Value {
    match l {
        Layout::Sliced(d) => json!({"kind": "Sliced", "dim": d}),
        Layout::Replicated => json!({"kind": "Replicated"}),
        Layout::Local => json!({"kind": "Local"}),
    }
}

fn elem_json(e: ElemType) -> &'static str {
    match e {
        ElemType::F16 => "F16",
        ElemType::F32 => "F32",
    }
}

fn same_shapes(inputs: &[Tensor]) -> Result<Vec<usize>, RuntimeError> {
    let first = inputs.first().ok_or_else(|| RuntimeError::ShapeMismatch("no ranks".into()))?;
    if let Some((r, t)) = inputs.iter().enumerate().find(|(_, t)| t.shape != first.shape) {
        return Err(RuntimeError::ShapeMismatch(format!("rank {r} has shape {:?}, rank 0 has {:?}", t.shape, first.shape)));
    }
    if first.shape.is_empty() {
        return Err(RuntimeError::ShapeMismatch("collectives need at least one axis".into()));
    }
    Ok(first.shape.clone())
}

fn build(v: Value, w: usize) -> Result<Program, RuntimeError> {
    program_from_value(v, &Bindings::new(w)).map_err(|e| RuntimeError::Invalid(e.to_string()))
}

impl Collective<'_> {
    pub fn new(cfg: &CommConfig) -> Collective<'_> {
        Collective { cfg, elem: ElemType::F32, mode: ExecMode::Threaded }
    }

    fn tensor(&self, name: &str, shape: &[usize], layout: Layout, group: usize) -> Value {
        json!({"name": name, "elem": elem_json(self.elem), "shape": shape, "layout": layout_json(layout), "group": group})
    }

    fn run(&self, p: &Program, ranks: Vec<HashMap<String, Tensor>>) -> Result<CollectiveRun, RuntimeError> {
        let report = execute(p, &plan(p), self.cfg, &RankInputs { ranks }, 0, self.mode)?;
        let outputs = report
            .rank_outputs
            .iter()
            .filter_map(|o| o[0].as_ref().map(|s| Tensor::new(s.region.local_shape(), s.data.clone())))
            .collect();
        let counters = (0..report.ranks)
            .map(|r| Counters {
                comm_bytes: report.comm_bytes[r],
                p2p_bytes: report.p2p_bytes[r],
                memory_bytes: report.memory_bytes[r],
            })
            .collect();
        Ok(CollectiveRun { outputs, counters, report })
    }

    fn per_rank(name: &str, inputs: &[Tensor]) -> Vec<HashMap<String, Tensor>> {
        inputs.iter().map(|t| HashMap::from([(name.to_string(), t.clone())])).collect()
    }

    fn check_divisible(shape: &[usize], w: usize) -> Result<(), RuntimeError> {
        let last = *shape.last().expect("checked non-empty");
        if !last.is_multiple_of(w) {
            return Err(RuntimeError::Divisibility(format!("last axis {last} over {w} ranks")));
        }
        Ok(())
    }

    /// Ring reduce-scatter along the last axis; rank `r` ends with block `r`.
    pub fn reduce_scatter(&self, inputs: &[Tensor], reducer: Reducer) -> Result<CollectiveRun, RuntimeError> {
        let shape = same_shapes(inputs)?;
        let w = inputs.len();
        Self::check_divisible(&shape, w)?;
        let p = build(
            json!({"name": "reduce_scatter", "groups": [{"id": 0, "size": w}],
                   "tensors": [self.tensor("x", &shape, Layout::Local, 0)],
                   "nodes": [{"id": "rs", "kind": "reduce_scatter", "attrs": {"reducer": reducer.symbol()}, "inputs": ["x"]}],
                   "outputs": ["rs"]}),
            w,
        )?;
        self.run(&p, Self::per_rank("x", inputs))
    }

    /// Ring all-gather of one block per rank along the last axis.
    pub fn all_gather(&self, slices: &[Tensor]) -> Result<CollectiveRun, RuntimeError> {
        let mut shape = same_shapes(slices)?;
        let w = slices.len();
        let axis = shape.len() - 1;
        shape[axis] *= w;
        let p = build(
            json!({"name": "all_gather", "groups": [{"id": 0, "size": w}],
                   "tensors": [self.tensor("x", &shape, Layout::Sliced(axis), 0)],
                   "nodes": [{"id": "ag", "kind": "all_gather", "inputs": ["x"]}],
                   "outputs": ["ag"]}),
            w,
        )?;
        self.run(&p, Self::per_rank("x", slices))
    }

    pub fn all_reduce(&self, inputs: &[Tensor], reducer: Reducer) -> Result<CollectiveRun, RuntimeError> {
        let shape = same_shapes(inputs)?;
        let w = inputs.len();
        let p = build(
            json!({"name": "all_reduce", "groups": [{"id": 0, "size": w}],
                   "tensors": [self.tensor("x", &shape, Layout::Local, 0)],
                   "nodes": [{"id": "ar", "kind": "all_reduce", "attrs": {"reducer": reducer.symbol()}, "inputs": ["x"]}],
                   "outputs": ["ar"]}),
            w,
        )?;
        self.run(&p, Self::per_rank("x", inputs))
    }

    /// Every rank ends with the root's tensor.
    pub fn broadcast(&self, inputs: &[Tensor], root: usize) -> Result<CollectiveRun, RuntimeError> {
        let shape = same_shapes(inputs)?;
        let w = inputs.len();
        if root >= w {
            return Err(RuntimeError::NoSuchRank(format!("root {root} in a group of {w}")));
        }
        let p = build(
            json!({"name": "broadcast", "groups": [{"id": 0, "size": w}],
                   "tensors": [self.tensor("x", &shape, Layout::Local, 0)],
                   "nodes": [{"id": "bc", "kind": "broadcast", "attrs": {"root": root}, "inputs": ["x"]}],
                   "outputs": ["bc"]}),
            w,
        )?;
        self.run(&p, Self::per_rank("x", inputs))
    }

    /// All-reduce whose reduced slice passes through `expr` before the
    /// gather. `$` names the in-flight value; `extras` are whole logical
    /// tensors that are replicated or sliced along the last axis.
    pub fn fused_all_reduce(
        &self,
        inputs: &[Tensor],
        reducer: Reducer,
        expr: &str,
        extras: &[(&str, Tensor, Layout)],
    ) -> Result<CollectiveRun, RuntimeError> {
        let shape = same_shapes(inputs)?;
        let w = inputs.len();
        Self::check_divisible(&shape, w)?;
        let axis = shape.len() - 1;
        let mut tensors = vec![self.tensor("x", &shape, Layout::Local, 0)];
        for (name, t, layout) in extras {
            match layout {
                Layout::Replicated => {}
                Layout::Sliced(d) if *d + shape.len() == axis + t.shape.len() => {}
                l => {
                    return Err(RuntimeError::OperandLayoutMismatch(format!(
                        "{name} is {l}; fused operands must be replicated or sliced along the reduced axis"
                    )))
                }
            }
            tensors.push(self.tensor(name, &t.shape, *layout, 0));
        }
        let p = build(
            json!({"name": "fused_all_reduce", "groups": [{"id": 0, "size": w}], "tensors": tensors,
                   "nodes": [{"id": "far", "kind": "fused_all_reduce",
                              "attrs": {"reducer": reducer.symbol(), "expr": expr}, "inputs": ["x"]}],
                   "outputs": ["far"]}),
            w,
        )?;
        let mut ranks = Self::per_rank("x", inputs);
        for (q, rank) in ranks.iter_mut().enumerate() {
            for (name, t, layout) in extras {
                let local = match layout {
                    Layout::Sliced(d) => t.block(*d, q, w),
                    _ => t.clone(),
                };
                rank.insert(name.to_string(), local);
            }
        }
        self.run(&p, ranks)
    }

    /// Sends one payload per rank of group 0 to the same position in group
    /// `dest_offset`, optionally through `expr` (which reads the payload as
    /// `x`). Returns what the receiving ranks hold.
    pub fn p2p(
        &self,
        payloads: &[Tensor],
        layout: Layout,
        expr: Option<&str>,
        dest_offset: i64,
    ) -> Result<CollectiveRun, RuntimeError> {
        let w = payloads.len();
        if dest_offset != 1 {
            return Err(RuntimeError::NoSuchRank(format!("GroupRank(GROUP{dest_offset:+}, RANK) from group 0 of 2")));
        }
        let mut shape = same_shapes(payloads)?;
        if let Layout::Sliced(d) = layout {
            shape[d] *= w;
        }
        let send = match expr {
            Some(e) => json!({"id": "send", "kind": "fused_send",
                              "attrs": {"dest": "GroupRank(GROUP+1, RANK)", "expr": e}}),
            None => json!({"id": "send", "kind": "send", "attrs": {"dest": "GroupRank(GROUP+1, RANK)"}, "inputs": ["x"]}),
        };
        let p = build(
            json!({"name": "p2p", "groups": [{"id": 0, "size": w}, {"id": 1, "size": w}],
                   "tensors": [self.tensor("x", &shape, layout, 0)],
                   "nodes": [send, {"id": "recv", "kind": "recv", "attrs": {"src": "GroupRank(GROUP-1, RANK)"}, "inputs": ["send"]}],
                   "outputs": ["recv"]}),
            2 * w,
        )?;
        let mut ranks = Self::per_rank("x", payloads);
        ranks.extend((0..w).map(|_| HashMap::new()));
        self.run(&p, ranks)
    }
}

pub fn ring_reduce_scatter(cfg: &CommConfig, inputs: &[Tensor], reducer: Reducer) -> Result<CollectiveRun, RuntimeError> {
    Collective::new(cfg).reduce_scatter(inputs, reducer)
}

pub fn ring_all_gather(cfg: &CommConfig, slices: &[Tensor]) -> Result<CollectiveRun, RuntimeError> {
    Collective::new(cfg).all_gather(slices)
}

pub fn ring_all_reduce(cfg: &CommConfig, inputs: &[Tensor], reducer: Reducer) -> Result<CollectiveRun, RuntimeError> {
    Collective::new(cfg).all_reduce(inputs, reducer)
}

pub fn fused_all_reduce(
    cfg: &CommConfig,
    inputs: &[Tensor],
    reducer: Reducer,
    expr: &str,
    extras: &[(&str, Tensor, Layout)],
) -> Result<CollectiveRun, RuntimeError> {
    Collective::new(cfg).fused_all_reduce(inputs, reducer, expr, extras)
}

pub fn p2p_send_recv(
    cfg: &CommConfig,
    payloads: &[Tensor],
    layout: Layout,
    expr: Option<&str>,
    dest_offset: i64,
) -> Result<CollectiveRun, RuntimeError> {
    Collective::new(cfg).p2p(payloads, layout, expr, dest_offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: usize) -> CommConfig {
        CommConfig { buffer_tile_elems: 8 * w, ..CommConfig::default() }
    }

    #[test]
    fn constant_reduce_scatter_and_all_reduce() {
        let inputs: Vec<Tensor> = (0..4).map(|r| Tensor::new(vec![8], vec![r as f32 + 1.0; 8])).collect();
        let rs = ring_reduce_scatter(&cfg(4), &inputs, Reducer::Sum).unwrap();
        for t in &rs.outputs {
            assert_eq!(t.data, vec![10.0, 10.0]);
        }
        let ar = ring_all_reduce(&cfg(4), &inputs, Reducer::Sum).unwrap();
        for t in &ar.outputs {
            assert_eq!(t.data, vec![10.0; 8]);
        }
        assert!(rs.counters.iter().all(|c| c.comm_bytes == 3 * 2 * 4));
        assert!(ar.counters.iter().all(|c| c.comm_bytes == 2 * 3 * 2 * 4));
    }

    #[test]
    fn gather_concatenates_in_rank_order() {
        let slices: Vec<Tensor> = (0..4).map(|r| Tensor::new(vec![2], vec![r as f32; 2])).collect();
        let ag = ring_all_gather(&cfg(4), &slices).unwrap();
        for t in &ag.outputs {
            assert_eq!(t.data, vec![0., 0., 1., 1., 2., 2., 3., 3.]);
        }
        let one = ring_all_gather(&cfg(1), &slices[..1]).unwrap();
        assert_eq!(one.outputs[0].data, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let inputs = vec![Tensor::new(vec![4], vec![0.0; 4]), Tensor::new(vec![2], vec![0.0; 2])];
        assert!(matches!(ring_all_reduce(&cfg(2), &inputs, Reducer::Sum), Err(RuntimeError::ShapeMismatch(_))));
    }

    #[test]
    fn send_to_missing_group() {
        let payloads = vec![Tensor::new(vec![2], vec![1.0, 2.0]); 2];
        let r = p2p_send_recv(&cfg(2), &payloads, Layout::Replicated, None, 2);
        assert!(matches!(r, Err(RuntimeError::NoSuchRank(_))));
        let ok = p2p_send_recv(&cfg(2), &payloads, Layout::Replicated, Some("x * 2"), 1).unwrap();
        assert_eq!(ok.outputs.len(), 2);
        assert_eq!(ok.outputs[1].data, vec![2.0, 4.0]);
        assert_eq!(ok.report.p2p_bytes, vec![8, 8, 0, 0]);
    }
}

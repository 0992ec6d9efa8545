use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::chunk::{ChunkMap, Segmentation};
use super::CommConfig;
use crate::program::{Layout, NodeId, Op, OpNode, Operand, Program};

/// One executable step: a single node, or an overlap group with its members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub id: NodeId,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<NodeId>,
}

impl Step {
    /// Nodes executed by this step, in order.
    pub fn nodes(&self) -> Vec<&str> {
        if self.members.is_empty() {
            vec![&self.id]
        } else {
            self.members.iter().map(String::as_str).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExecutionPlan {
    pub steps: Vec<Step>,
}

impl ExecutionPlan {
    /// Steps that launch work: receives complete the matching send and are
    /// not counted.
    pub fn kernel_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.kind != "recv").count()
    }
}

/// Chunk map a collective node uses; `None` for non-collectives.
pub fn chunk_map(p: &Program, n: &OpNode, cfg: &CommConfig) -> Option<ChunkMap> {
    let size = p.group(n.info.group).map_or(1, |g| g.size);
    let input_shape = |o: &Operand| p.operand_info(o).map(|i| i.shape);
    let seg = match &n.op {
        Op::AllReduce { input, .. } | Op::Reduce { input, .. } | Op::Broadcast { input, .. } => {
            Segmentation::for_all_reduce(&input_shape(input)?, size)
        }
        Op::ReduceScatter { .. } | Op::AllGather { .. } => {
            let axis = match n.info.layout {
                Layout::Sliced(d) => d,
                _ => match &n.op {
                    Op::AllGather { input, .. } => match p.operand_info(input)?.layout {
                        Layout::Sliced(d) => d,
                        _ => return None,
                    },
                    _ => return None,
                },
            };
            Segmentation::along_axis(&n.info.shape, axis, size)
        }
        Op::FusedAllReduce { axis, .. } => {
            let shape = &n.info.shape;
            Segmentation::along_axis(shape, axis.unwrap_or(shape.len().checked_sub(1)?), size)
        }
        _ => return None,
    };
    Some(ChunkMap::new(seg, cfg.buffer_tile_elems, cfg.channels))
}

/// Topological order of steps, overlap members folded into their group.
/// Ties are broken by step id.
pub fn plan(p: &Program) -> ExecutionPlan {
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for n in &p.nodes {
        if let Op::Overlap { members } = &n.op {
            for m in members {
                owner.insert(m, &n.id);
            }
        }
    }
    let unit = |id: &str| -> String { owner.get(id).copied().unwrap_or(id).to_string() };
    let mut deps: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for n in &p.nodes {
        let u = unit(&n.id);
        let entry = deps.entry(u.clone()).or_default();
        let node_deps: BTreeSet<String> = match &n.op {
            Op::Overlap { .. } => BTreeSet::new(),
            op => op.node_deps().into_iter().collect(),
        };
        for d in node_deps {
            let du = unit(&d);
            if du != u {
                entry.insert(du);
            }
        }
    }
    let mut ready: BTreeSet<String> = deps.iter().filter(|(_, d)| d.is_empty()).map(|(k, _)| k.clone()).collect();
    let mut done: BTreeSet<String> = BTreeSet::new();
    let mut steps = Vec::new();
    while let Some(id) = ready.pop_first() {
        done.insert(id.clone());
        let node = p.node(&id).expect("unit ids are node ids");
        let members = match &node.op {
            Op::Overlap { members } => members.clone(),
            _ => Vec::new(),
        };
        steps.push(Step { id: id.clone(), kind: node.op.kind_name(), members });
        for (k, d) in &deps {
            if !done.contains(k) && !ready.contains(k) && d.contains(&id) && d.iter().all(|x| done.contains(x)) {
                ready.insert(k.clone());
            }
        }
    }
    ExecutionPlan { steps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::json::{program_from_str, Bindings};

    #[test]
    fn overlap_members_fold_into_one_step() {
        let text = r#"{"name":"t","groups":[{"id":0,"size":2}],
          "tensors":[{"name":"x","elem":"F32","shape":[2,4],"layout":{"kind":"Sliced","dim":1},"group":0},
                     {"name":"w","elem":"F32","shape":[4,4],"layout":{"kind":"Sliced","dim":0},"group":0}],
          "nodes":[{"id":"mm","kind":"matmul","inputs":["x","w"]},
                   {"id":"ar","kind":"all_reduce","attrs":{"reducer":"+"},"inputs":["mm"]},
                   {"id":"ol","kind":"overlap","inputs":["mm","ar"]},
                   {"id":"y","kind":"pointwise","attrs":{"expr":"ol * 2"}}],
          "outputs":["y"]}"#;
        let p = program_from_str(text, &Bindings::new(2)).unwrap();
        let pl = plan(&p);
        let ids: Vec<&str> = pl.steps.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["ol", "y"]);
        assert_eq!(pl.steps[0].members, ["mm", "ar"]);
        assert_eq!(pl.kernel_steps(), 2);
    }
}

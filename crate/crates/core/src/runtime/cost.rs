//! Simulated clock.
//!
//! A communication round costs `alpha + bytes / beta` where `bytes` is the
//! largest chunk moved in that round by any channel; computation costs
//! element operations over `gamma`; each launched step pays `lambda`.
//! Overlapped members are modeled as a pipeline over chunks where each
//! resource serves its tasks in a fixed wavefront order.

use std::collections::HashMap;

use serde::Serialize;

use super::chunk::ChunkMap;
use super::plan::{chunk_map, Step};
use super::CommConfig;
use crate::eval::ReduceKind;
use crate::program::{kernel_infos, Kernel, Layout, Op, OpNode, Program, ValueInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Resource {
    Compute(usize),
    Net(usize),
    Link,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage {
    pub resource: Resource,
    pub time: f64,
}

/// Makespan of `chunks` chunks flowing through `stages` in order, each
/// stage spending `time / chunks` per chunk. Tasks are issued by increasing
/// `chunk + stage`, so every start time is a max-plus expression of the
/// durations and the result never decreases when a duration grows.
pub fn pipeline_time(stages: &[Stage], chunks: usize) -> f64 {
    let k = chunks.max(1);
    let s = stages.len();
    if s == 0 {
        return 0.0;
    }
    let mut avail: HashMap<Resource, f64> = HashMap::new();
    let mut end = vec![vec![0.0f64; k]; s];
    for wave in 0..k + s - 1 {
        for st in 0..s {
            let Some(i) = wave.checked_sub(st).filter(|&i| i < k) else { continue };
            let ready = if st == 0 { 0.0 } else { end[st - 1][i] };
            let free = avail.get(&stages[st].resource).copied().unwrap_or(0.0);
            let e = ready.max(free) + stages[st].time / k as f64;
            end[st][i] = e;
            avail.insert(stages[st].resource, e);
        }
    }
    end[s - 1][k - 1]
}

fn ring_time(map: &ChunkMap, rounds: usize, bw: usize, cfg: &CommConfig) -> f64 {
    if rounds == 0 {
        return 0.0;
    }
    let (alpha, beta) = cfg.link();
    (0..map.tiles)
        .map(|t| {
            let largest = (0..map.parts())
                .flat_map(|s| (0..map.channels).map(move |c| (s, c)))
                .map(|(s, c)| map.range(s, t, c).len())
                .max()
                .unwrap_or(0);
            rounds as f64 * (alpha + (largest * bw) as f64 / beta)
        })
        .sum()
}

fn region_elems(info: &ValueInfo, size: usize) -> usize {
    match info.layout {
        Layout::Sliced(_) => info.numel() / size.max(1),
        _ => info.numel(),
    }
}

/// Compute stage of a kernel. Every element loaded from or stored to
/// memory costs as much as one operation; the in-flight value of a fused
/// collective and an unstored primary result stay in registers.
fn kernel_stages(p: &Program, k: &Kernel, in_flight: Option<&ValueInfo>, store_primary: bool, cfg: &CommConfig) -> Vec<Stage> {
    let Ok(infos) = kernel_infos(p, k, in_flight) else { return Vec::new() };
    let group = infos.last().map_or(0, |i| i.body.group);
    let size = p.group(group).map_or(1, |g| g.size);
    let body = infos.iter().map(|i| region_elems(&i.body, size)).max().unwrap_or(1);
    let mut ops = 0.0;
    let mut reductions = 0;
    let last = k.stmts.len() - 1;
    for (i, (s, info)) in k.stmts.iter().zip(&infos).enumerate() {
        ops += (region_elems(&info.body, size) * s.expr.op_count()) as f64;
        if s.update.is_some() || (i == last && store_primary) {
            ops += region_elems(&info.value, size) as f64;
        }
        if ReduceKind::of(&s.expr).is_some() && matches!(info.body.layout, Layout::Sliced(_)) && size > 1 {
            reductions += 1;
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for o in k.operands() {
        if seen.insert(o.to_string()) {
            ops += p.operand_info(o).map_or(0, |i| region_elems(&i, size).min(body)) as f64;
        }
    }
    let mut stages = vec![Stage { resource: Resource::Compute(group), time: ops / cfg.gamma }];
    if reductions > 0 {
        stages.push(Stage { resource: Resource::Net(group), time: reductions as f64 * cfg.link().0 });
    }
    stages
}

/// Stages of one node's work, without launch overhead.
pub fn node_stages(p: &Program, n: &OpNode, cfg: &CommConfig) -> Vec<Stage> {
    let g = n.info.group;
    let size = p.group(g).map_or(1, |x| x.size);
    let bw = |o: &crate::program::Operand| p.operand_info(o).map_or(4, |i| i.elem.byte_width());
    let w1 = size.saturating_sub(1);
    let net = |time: f64| Stage { resource: Resource::Net(g), time };
    match &n.op {
        Op::MatMul { lhs, .. } => {
            let a = p.operand_info(lhs).expect("validated");
            let last = a.shape.len() - 1;
            let k_local = if a.layout == Layout::Sliced(last) { a.shape[last] / size } else { a.shape[last] };
            let out = region_elems(&n.info, size);
            vec![Stage { resource: Resource::Compute(g), time: (out * k_local) as f64 / cfg.gamma }]
        }
        Op::Compute(k) => kernel_stages(p, k, None, true, cfg),
        Op::AllReduce { input, .. } => {
            let map = chunk_map(p, n, cfg).expect("collective");
            vec![net(ring_time(&map, 2 * w1, bw(input), cfg))]
        }
        Op::ReduceScatter { input, .. } => {
            let map = chunk_map(p, n, cfg).expect("collective");
            vec![net(ring_time(&map, w1, bw(input), cfg))]
        }
        Op::AllGather { input, .. } => {
            let map = chunk_map(p, n, cfg).expect("collective");
            vec![net(ring_time(&map, w1, bw(input), cfg))]
        }
        Op::Reduce { input, .. } | Op::Broadcast { input, .. } => {
            let map = chunk_map(p, n, cfg).expect("collective");
            let (alpha, beta) = cfg.link();
            let seg = map.seg.segments.iter().map(|s| s.len()).max().unwrap_or(0);
            let direct = if w1 == 0 { 0.0 } else { alpha + (w1 * seg * bw(input)) as f64 / beta };
            vec![net(ring_time(&map, w1, bw(input), cfg) + direct)]
        }
        Op::Send { payload, .. } => {
            let mut stages = if payload.is_identity() { Vec::new() } else { kernel_stages(p, payload, None, false, cfg) };
            let (alpha, beta) = cfg.link();
            let bytes = region_elems(&n.info, size) * n.info.elem.byte_width();
            stages.push(Stage { resource: Resource::Link, time: alpha + bytes as f64 / beta });
            stages
        }
        Op::Recv { .. } => Vec::new(),
        Op::FusedAllReduce { input, kernel, axis, .. } => {
            let map = chunk_map(p, n, cfg).expect("collective");
            let in_info = p.operand_info(input).expect("validated");
            let flight = ValueInfo { layout: Layout::Sliced(axis.unwrap_or(in_info.shape.len() - 1)), ..in_info };
            // The computation runs inside the collective kernel, between its two phases.
            let inner: f64 = kernel_stages(p, kernel, Some(&flight), false, cfg).iter().map(|s| s.time).sum();
            vec![net(2.0 * ring_time(&map, w1, bw(input), cfg) + inner)]
        }
        Op::Overlap { .. } => Vec::new(),
    }
}

/// Launch overhead of one node.
pub fn launch(n: &OpNode, cfg: &CommConfig) -> f64 {
    match &n.op {
        Op::Recv { .. } => 0.0,
        Op::FusedAllReduce { kernel, .. } => cfg.lambda * (1 + kernel.stmts.len()) as f64,
        _ => cfg.lambda,
    }
}

/// Number of chunks a node's work splits into when pipelined.
fn node_chunks(p: &Program, n: &OpNode, cfg: &CommConfig) -> usize {
    chunk_map(p, n, cfg).map_or(1, |m| m.overlap_chunks())
}

fn sum(stages: &[Stage]) -> f64 {
    stages.iter().map(|s| s.time).sum()
}

/// Simulated duration of one plan step.
pub fn step_time(p: &Program, step: &Step, cfg: &CommConfig) -> f64 {
    let nodes: Vec<&OpNode> = step.nodes().into_iter().filter_map(|id| p.node(id)).collect();
    let lambda: f64 = nodes.iter().map(|n| launch(n, cfg)).sum();
    if let [n] = nodes.as_slice() {
        return lambda + sum(&node_stages(p, n, cfg));
    }
    let stages: Vec<Stage> = nodes.iter().flat_map(|n| node_stages(p, n, cfg)).collect();
    let chunks = nodes.iter().map(|n| node_chunks(p, n, cfg)).max().unwrap_or(1);
    lambda + pipeline_time(&stages, chunks).min(sum(&stages))
}

/// Sum of step durations; steps run one after another.
pub fn program_time(p: &Program, steps: &[Step], cfg: &CommConfig) -> f64 {
    steps.iter().map(|s| step_time(p, s, cfg)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(r: Resource, t: f64) -> Stage {
        Stage { resource: r, time: t }
    }

    #[test]
    fn two_stage_pipeline_bound() {
        let stages = [st(Resource::Compute(0), 8.0), st(Resource::Net(0), 8.0)];
        assert!((pipeline_time(&stages, 8) - 9.0).abs() < 1e-12);
        assert!((pipeline_time(&stages, 1) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn shared_resource_serializes() {
        let stages = [st(Resource::Net(0), 4.0), st(Resource::Net(0), 4.0)];
        assert!((pipeline_time(&stages, 4) - 8.0).abs() < 1e-12);
    }
}

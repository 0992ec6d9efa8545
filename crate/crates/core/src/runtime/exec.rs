//! Per-rank execution of a plan.
//!
//! Each rank keeps only its physical blocks: sliced values as the local
//! block, replicated and local values whole. Operands are read by global
//! coordinate, so a replicated operand feeds a sliced computation without
//! any data movement.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::chunk::{production_order, ChunkMap};
use super::comm::{run_ranks, ExecMode, RankCtx, Tag};
use super::cost::program_time;
use super::plan::{chunk_map, plan, ExecutionPlan, Step};
use super::ring::{self, GroupView};
use super::{CommConfig, RuntimeError};
use crate::eval::{eval_elementwise, gather, matmul, matmul_elem, Col, ReduceKind, Region, StmtCtx, ValueRef};
use crate::inputs::{localize, LogicalInputs, RankInputs};
use crate::oracle::Results;
use crate::program::{
    has_errors, kernel_infos, validate_program, Expr, Kernel, Layout, Op, OpNode, Operand, Program, Severity, Source,
    ValueInfo,
};
use crate::value::{Logical, Tensor};

type Result<T> = std::result::Result<T, RuntimeError>;

/// A physical value held by one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Stored {
    pub region: Region,
    pub data: Vec<f32>,
}

impl Stored {
    fn view(&self) -> ValueRef<'_, '_> {
        ValueRef { region: &self.region, data: &self.data }
    }
}

fn region_of(info: &ValueInfo, q: usize, size: usize) -> Region {
    match info.layout {
        Layout::Sliced(d) => Region::block(&info.shape, d, q, size),
        _ => Region::full(&info.shape),
    }
}

/// Digest of one program output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputDigest {
    pub name: String,
    pub shape: Vec<usize>,
    pub layout: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub program: String,
    pub ranks: usize,
    pub plan: Vec<Step>,
    pub steps: usize,
    pub kernel_steps: usize,
    pub simulated_time: f64,
    /// Host time; excluded from JSON so reports are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
    pub comm_bytes: Vec<u64>,
    pub p2p_bytes: Vec<u64>,
    pub memory_bytes: Vec<u64>,
    /// Elements of each declared tensor held by each rank.
    pub tensor_elems: BTreeMap<String, Vec<usize>>,
    pub outputs: Vec<OutputDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation: Option<f64>,
    #[serde(skip)]
    pub results: Results,
    /// Per-rank physical output values (`None` where the rank holds none).
    #[serde(skip)]
    pub rank_outputs: Vec<Vec<Option<Stored>>>,
}

struct Env<'a> {
    p: &'a Program,
    plan: &'a ExecutionPlan,
    cfg: &'a CommConfig,
    inputs: &'a RankInputs,
    seed: u64,
    slots: HashMap<&'a str, u32>,
}

struct RankOut {
    outputs: Vec<Option<Stored>>,
    state: Vec<Option<Stored>>,
}

type State = HashMap<Source, Stored>;

fn missing(src: &Source, rank: usize) -> RuntimeError {
    RuntimeError::Invalid(format!("value {src:?} is not available on rank {rank}"))
}

/// Group whose ranks execute a node.
fn exec_group(p: &Program, n: &OpNode) -> usize {
    match &n.op {
        Op::Send { payload, .. } => {
            kernel_infos(p, payload, None).ok().and_then(|i| i.last().map(|s| s.value.group)).unwrap_or(n.info.group)
        }
        _ => n.info.group,
    }
}

fn view_of(p: &Program, gid: usize, rank: usize) -> Option<GroupView> {
    let g = p.group(gid)?;
    g.local_rank(rank).map(|q| GroupView { first: g.first_rank, size: g.size, q })
}

/// Produces a matmul output chunk by chunk in rank-rotated order.
struct Producer<'a> {
    a: &'a [f32],
    b: &'a [f32],
    k: usize,
    n: usize,
    map: &'a ChunkMap,
    out: Vec<f32>,
    done: Vec<bool>,
    order: Vec<usize>,
    next: usize,
}

impl<'a> Producer<'a> {
    fn new(a: &'a [f32], b: &'a [f32], k: usize, n: usize, numel: usize, map: &'a ChunkMap, q: usize) -> Self {
        let count = map.overlap_chunks();
        Producer { a, b, k, n, map, out: vec![0.0; numel], done: vec![false; count], order: production_order(q, count), next: 0 }
    }

    fn produce(&mut self, c: usize) {
        let parts = self.map.parts();
        let (tile, seg) = (c / parts, c % parts);
        let s = self.map.seg.segments[seg];
        for i in self.map.tile_range(seg, tile) {
            let idx = s.index(i);
            self.out[idx] = matmul_elem(self.a, self.b, self.k, self.n, idx / self.n, idx % self.n);
        }
        self.done[c] = true;
    }

    fn ensure(&mut self, tile: usize, seg: usize) {
        let c = tile * self.map.parts() + seg;
        while !self.done[c] {
            let next = self.order[self.next];
            self.next += 1;
            self.produce(next);
        }
    }

    fn finish(mut self) -> Vec<f32> {
        while self.next < self.order.len() {
            let next = self.order[self.next];
            self.next += 1;
            if !self.done[next] {
                self.produce(next);
            }
        }
        self.out
    }

    /// Own-data source for a ring collective: packed `range` of `seg`.
    fn chunk(&mut self, seg: usize, range: Range<usize>) -> Vec<f32> {
        if !range.is_empty() {
            let first = range.start / self.map.tile_share;
            let last = (range.end - 1) / self.map.tile_share;
            for tile in first..=last {
                self.ensure(tile, seg);
            }
        }
        self.map.seg.segments[seg].pack(&self.out, range)
    }
}

impl Env<'_> {
    fn slot(&self, id: &str) -> u32 {
        self.slots[id]
    }

    fn get<'s>(&self, state: &'s State, src: &Source, rank: usize) -> Result<&'s Stored> {
        state.get(src).ok_or_else(|| missing(src, rank))
    }

    fn bw(&self, o: &Operand) -> usize {
        self.p.operand_info(o).map_or(4, |i| i.elem.byte_width())
    }

    /// Evaluates a kernel on this rank; returns one value per statement.
    async fn run_kernel(
        &self,
        ctx: &RankCtx,
        g: GroupView,
        state: &State,
        k: &Kernel,
        in_flight: Option<(&ValueInfo, &Stored)>,
        slot: u32,
        store_primary: bool,
    ) -> Result<Vec<Stored>> {
        let infos = kernel_infos(self.p, k, in_flight.map(|(i, _)| i)).map_err(|e| RuntimeError::Invalid(e.to_string()))?;
        for o in k.operands() {
            self.get(state, &o.source, ctx.rank)?;
        }
        let mut loads: BTreeMap<&Operand, usize> = BTreeMap::new();
        let mut members: HashMap<&str, Stored> = HashMap::new();
        let mut out = Vec::with_capacity(k.stmts.len());
        for (i, (s, info)) in k.stmts.iter().zip(&infos).enumerate() {
            let region = region_of(&info.body, g.q, g.size);
            for o in s.expr.operands() {
                let len = state[&o.source].data.len().min(region.numel());
                let e = loads.entry(o).or_insert(0);
                *e = (*e).max(len);
            }
            let (reduction, body) = match ReduceKind::of(&s.expr) {
                Some((kind, b)) => (Some(kind), b),
                None => (None, &s.expr),
            };
            let values = {
                let leaf = |e: &Expr| -> Col<'_> {
                    match e {
                        Expr::Operand(o) => gather(state[&o.source].view(), &region),
                        Expr::Member(m) => gather(members[m.as_str()].view(), &region),
                        Expr::InFlight => gather(in_flight.expect("checked by inference").1.view(), &region),
                        _ => unreachable!("not a leaf"),
                    }
                };
                let sctx = StmtCtx { region: &region, seed: self.seed, leaf: &leaf };
                eval_elementwise(body, &sctx)
            };
            let value = match reduction {
                Some(kind) => {
                    let partial = kind.partial(&values);
                    let combined = if matches!(info.body.layout, Layout::Sliced(_)) && g.size > 1 {
                        let all = ring::exchange_scalars(ctx, g, slot as usize, 100 + i as u32, partial).await?;
                        kind.combine(&all)
                    } else {
                        partial
                    };
                    Stored { region: Region::full(&[]), data: vec![kind.finish(combined)] }
                }
                None => Stored { region, data: values },
            };
            members.insert(&s.name, value.clone());
            out.push(value);
        }
        let loaded: usize = loads.iter().map(|(o, n)| n * self.bw(o)).sum();
        let last = k.stmts.len() - 1;
        let stored: usize = k
            .stmts
            .iter()
            .zip(&infos)
            .zip(&out)
            .enumerate()
            .filter(|(i, ((s, _), _))| (*i == last && store_primary) || s.update.is_some())
            .map(|(_, ((_, info), v))| v.data.len() * info.value.elem.byte_width())
            .sum();
        ctx.add_memory((loaded + stored) as u64);
        Ok(out)
    }

    fn matmul_operands<'s>(&self, state: &'s State, lhs: &Operand, rhs: &Operand, rank: usize) -> Result<(&'s Stored, &'s Stored, usize, usize)> {
        if lhs.slice.is_some() || rhs.slice.is_some() {
            return Err(RuntimeError::Invalid("matmul operands cannot be slice views".into()));
        }
        let a = self.get(state, &lhs.source, rank)?;
        let b = self.get(state, &rhs.source, rank)?;
        let al = a.region.local_shape();
        let bl = b.region.local_shape();
        let k = *al.last().expect("matrix operand");
        if bl.len() != 2 || bl[0] != k {
            return Err(RuntimeError::ShapeMismatch(format!("local matmul blocks {al:?} x {bl:?}")));
        }
        Ok((a, b, k, bl[1]))
    }

    /// Runs one node on this rank, writing its value and writes into `state`.
    async fn run_node(&self, ctx: &RankCtx, state: &mut State, n: &OpNode) -> Result<()> {
        let p = self.p;
        if let Op::Overlap { members } = &n.op {
            // Members may span groups; each member checks its own.
            self.run_overlap(ctx, state, members).await?;
            if let Some(v) = members.last().and_then(|l| state.get(&Source::Node(l.clone()))).cloned() {
                state.insert(Source::Node(n.id.clone()), v);
            }
            return Ok(());
        }
        let Some(g) = view_of(p, exec_group(p, n), ctx.rank) else { return Ok(()) };
        let slot = self.slot(&n.id);
        let step = slot as usize;
        let out_region = region_of(&n.info, g.q, g.size);
        let out_bw = n.info.elem.byte_width();
        let mut writes: Vec<(String, Stored)> = Vec::new();
        let value = match &n.op {
            Op::MatMul { lhs, rhs } => {
                let (a, b, k, cols) = self.matmul_operands(state, lhs, rhs, ctx.rank)?;
                let rows = a.data.len() / k.max(1);
                if rows * cols != out_region.numel() {
                    return Err(RuntimeError::ShapeMismatch(format!("matmul {} output block", n.id)));
                }
                ctx.add_memory(((a.data.len() + b.data.len() + rows * cols) * out_bw) as u64);
                Stored { region: out_region, data: matmul(&a.data, &b.data, rows, k, cols) }
            }
            Op::Compute(k) => {
                let vals = self.run_kernel(ctx, g, state, k, None, slot, true).await?;
                for (s, v) in k.stmts.iter().zip(&vals) {
                    if let Some(t) = &s.update {
                        writes.push((t.clone(), v.clone()));
                    }
                }
                vals.into_iter().last().expect("non-empty kernel")
            }
            Op::AllReduce { reducer, input } => {
                let x = self.get(state, &input.source, ctx.rank)?;
                let map = chunk_map(p, n, self.cfg).expect("collective");
                let bw = self.bw(input);
                ctx.add_memory((2 * x.data.len() * bw) as u64);
                let data = ring::all_reduce(ctx, g, &map, *reducer, bw, step, &x.data).await?;
                Stored { region: out_region, data }
            }
            Op::ReduceScatter { reducer, input, .. } => {
                let x = self.get(state, &input.source, ctx.rank)?;
                let map = chunk_map(p, n, self.cfg).expect("collective");
                let bw = self.bw(input);
                let mut own = |s: usize, r: Range<usize>| map.seg.segments[s].pack(&x.data, r);
                let data = ring::reduce_scatter(ctx, g, &map, *reducer, bw, step, 0, &mut own).await?;
                ctx.add_memory(((x.data.len() + data.len()) * bw) as u64);
                Stored { region: out_region, data }
            }
            Op::AllGather { input, restores } => {
                let x = self.get(state, &input.source, ctx.rank)?;
                let map = chunk_map(p, n, self.cfg).expect("collective");
                let bw = self.bw(input);
                let mut buf = vec![0.0f32; n.info.numel()];
                ring::all_gather(ctx, g, &map, bw, step, 1, &x.data, &mut buf).await?;
                ctx.add_memory(((x.data.len() + buf.len()) * bw) as u64);
                let v = Stored { region: out_region, data: buf };
                if let Some(t) = restores {
                    writes.push((t.clone(), v.clone()));
                }
                v
            }
            Op::Reduce { reducer, input, root } => {
                let x = self.get(state, &input.source, ctx.rank)?;
                let map = chunk_map(p, n, self.cfg).expect("collective");
                let bw = self.bw(input);
                ctx.add_memory((2 * x.data.len() * bw) as u64);
                let data = ring::reduce(ctx, g, &map, *reducer, bw, step, *root, &x.data).await?;
                Stored { region: out_region, data: data.unwrap_or_else(|| x.data.clone()) }
            }
            Op::Broadcast { input, root, restores } => {
                let x = self.get(state, &input.source, ctx.rank)?;
                let map = chunk_map(p, n, self.cfg).expect("collective");
                let bw = self.bw(input);
                ctx.add_memory((2 * x.data.len() * bw) as u64);
                let data = ring::broadcast(ctx, g, &map, bw, step, *root, &x.data).await?;
                let v = Stored { region: out_region, data };
                if let Some(t) = restores {
                    writes.push((t.clone(), v.clone()));
                }
                v
            }
            Op::Send { payload, dest } => {
                let target = dest
                    .target_group(exec_group(p, n), p.groups.len())
                    .and_then(|id| p.group(id).copied())
                    .filter(|t| g.q < t.size)
                    .ok_or_else(|| RuntimeError::NoSuchRank(format!("{dest} from rank {}", ctx.rank)))?;
                let v = self.run_kernel(ctx, g, state, payload, None, slot, false).await?.pop().expect("non-empty kernel");
                ctx.add_p2p((v.data.len() * out_bw) as u64);
                ctx.send(target.first_rank + g.q, Tag::new(step, 0, 0), v.data);
                return Ok(());
            }
            Op::Recv { input, src } => {
                let Source::Node(send_id) = &input.source else {
                    return Err(RuntimeError::Invalid(format!("recv {} is not paired with a send", n.id)));
                };
                let from = src
                    .target_group(n.info.group, p.groups.len())
                    .and_then(|id| p.group(id).copied())
                    .filter(|s| g.q < s.size)
                    .ok_or_else(|| RuntimeError::NoSuchRank(format!("{src} from rank {}", ctx.rank)))?;
                let data = ctx.recv(from.first_rank + g.q, Tag::new(self.slot(send_id) as usize, 0, 0)).await?;
                if data.len() != out_region.numel() {
                    return Err(RuntimeError::ShapeMismatch(format!("recv {} got {} elements", n.id, data.len())));
                }
                ctx.add_memory((data.len() * out_bw) as u64);
                Stored { region: out_region, data }
            }
            Op::FusedAllReduce { reducer, input, kernel, axis, restores } => {
                let x = self.get(state, &input.source, ctx.rank)?;
                let map = chunk_map(p, n, self.cfg).expect("collective");
                let mut own = |s: usize, r: Range<usize>| map.seg.segments[s].pack(&x.data, r);
                let v = self.fused_all_reduce(ctx, g, state, n, *reducer, input, kernel, *axis, restores, &mut own, &mut writes).await?;
                ctx.add_memory((x.data.len() * self.bw(input)) as u64);
                v
            }
            Op::Overlap { .. } => unreachable!("handled above"),
        };
        for (t, v) in writes {
            state.insert(Source::Written { node: n.id.clone(), tensor: t }, v);
        }
        state.insert(Source::Node(n.id.clone()), value);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    async fn fused_all_reduce(
        &self,
        ctx: &RankCtx,
        g: GroupView,
        state: &State,
        n: &OpNode,
        reducer: crate::program::Reducer,
        input: &Operand,
        kernel: &Kernel,
        axis: Option<usize>,
        restores: &Option<String>,
        own: &mut dyn FnMut(usize, Range<usize>) -> Vec<f32>,
        writes: &mut Vec<(String, Stored)>,
    ) -> Result<Stored> {
        let p = self.p;
        let step = self.slot(&n.id) as usize;
        let map = chunk_map(p, n, self.cfg).expect("collective");
        let bw = self.bw(input);
        let in_info = p.operand_info(input).ok_or_else(|| RuntimeError::Invalid(format!("operand {input}")))?;
        let axis = axis.unwrap_or(in_info.shape.len() - 1);
        let mine = ring::reduce_scatter(ctx, g, &map, reducer, bw, step, 0, own).await?;
        let flight_info = ValueInfo { layout: Layout::Sliced(axis), ..in_info.clone() };
        let flight = Stored { region: Region::block(&in_info.shape, axis, g.q, g.size), data: mine };
        for o in kernel.operands() {
            let info = p.operand_info(o).ok_or_else(|| RuntimeError::Invalid(format!("operand {o}")))?;
            match info.layout {
                Layout::Sliced(d) if d != axis || info.shape.len() != in_info.shape.len() => {
                    return Err(RuntimeError::OperandLayoutMismatch(format!("{o} is {} but the collective slices axis {axis}", info.layout)));
                }
                Layout::Local => {
                    return Err(RuntimeError::OperandLayoutMismatch(format!("{o} is Local")));
                }
                _ => {}
            }
        }
        let vals = self.run_kernel(ctx, g, state, kernel, Some((&flight_info, &flight)), step as u32, false).await?;
        let primary = vals.last().expect("non-empty kernel");
        if primary.region != flight.region {
            return Err(RuntimeError::OperandLayoutMismatch(format!("fused computation of {} is not aligned with its slice", n.id)));
        }
        let mut buf = vec![0.0f32; in_info.numel()];
        ring::all_gather(ctx, g, &map, bw, step, 1, &primary.data, &mut buf).await?;
        for (s, v) in kernel.stmts.iter().zip(&vals) {
            if let Some(t) = &s.update {
                if Some(t) != restores.as_ref() {
                    writes.push((t.clone(), v.clone()));
                }
            }
        }
        ctx.add_memory((buf.len() * n.info.elem.byte_width()) as u64);
        let v = Stored { region: Region::full(&in_info.shape), data: buf };
        if let Some(t) = restores {
            writes.push((t.clone(), v.clone()));
        }
        Ok(v)
    }

    /// Matmul followed by a collective on its output, interleaved chunk by chunk.
    fn interleavable<'n>(&self, members: &'n [String]) -> Option<(&'n OpNode, &'n OpNode)>
    where
        Self: 'n,
    {
        let [a, b] = members else { return None };
        let mm = self.p.node(a)?;
        let coll = self.p.node(b)?;
        let Op::MatMul { .. } = mm.op else { return None };
        let input = match &coll.op {
            Op::AllReduce { input, .. } | Op::ReduceScatter { input, .. } | Op::FusedAllReduce { input, .. } => input,
            _ => return None,
        };
        let direct = *input == Operand::node(a.clone());
        let same_group = mm.info.group == coll.info.group;
        let full = matches!(mm.info.layout, Layout::Local | Layout::Replicated);
        (direct && same_group && full).then_some((mm, coll))
    }

    async fn run_overlap(&self, ctx: &RankCtx, state: &mut State, members: &[String]) -> Result<()> {
        let p = self.p;
        let Some((mm, coll)) = self.interleavable(members) else {
            for m in members {
                let node = p.node(m).ok_or_else(|| RuntimeError::Invalid(format!("unknown member {m}")))?;
                Box::pin(self.run_node(ctx, state, node)).await?;
            }
            return Ok(());
        };
        let Some(g) = view_of(p, mm.info.group, ctx.rank) else { return Ok(()) };
        let Op::MatMul { lhs, rhs } = &mm.op else { unreachable!() };
        let map = chunk_map(p, coll, self.cfg).expect("collective");
        let step = self.slot(&coll.id) as usize;
        let out_region = region_of(&mm.info, g.q, g.size);
        let (a, b, k, cols) = self.matmul_operands(state, lhs, rhs, ctx.rank)?;
        if (a.data.len() / k.max(1)) * cols != out_region.numel() {
            return Err(RuntimeError::ShapeMismatch(format!("matmul {} output block", mm.id)));
        }
        let mm_bytes = (a.data.len() + b.data.len() + out_region.numel()) * mm.info.elem.byte_width();
        let mut prod = Producer::new(&a.data, &b.data, k, cols, out_region.numel(), &map, g.q);
        let mut writes: Vec<(String, Stored)> = Vec::new();
        let coll_value = {
            let mut own = |s: usize, r: Range<usize>| prod.chunk(s, r);
            match &coll.op {
                Op::AllReduce { reducer, input } => {
                    let bw = self.bw(input);
                    let mine = ring::reduce_scatter(ctx, g, &map, *reducer, bw, step, 0, &mut own).await?;
                    let mut buf = vec![0.0f32; out_region.numel()];
                    ring::all_gather(ctx, g, &map, bw, step, 1, &mine, &mut buf).await?;
                    ctx.add_memory((2 * buf.len() * bw) as u64);
                    Stored { region: region_of(&coll.info, g.q, g.size), data: buf }
                }
                Op::ReduceScatter { reducer, input, .. } => {
                    let bw = self.bw(input);
                    let data = ring::reduce_scatter(ctx, g, &map, *reducer, bw, step, 0, &mut own).await?;
                    ctx.add_memory(((out_region.numel() + data.len()) * bw) as u64);
                    Stored { region: region_of(&coll.info, g.q, g.size), data }
                }
                Op::FusedAllReduce { reducer, input, kernel, axis, restores } => {
                    let v = self
                        .fused_all_reduce(ctx, g, state, coll, *reducer, input, kernel, *axis, restores, &mut own, &mut writes)
                        .await?;
                    ctx.add_memory((out_region.numel() * self.bw(input)) as u64);
                    v
                }
                _ => unreachable!("checked by interleavable"),
            }
        };
        ctx.add_memory(mm_bytes as u64);
        let mm_value = Stored { region: out_region, data: prod.finish() };
        state.insert(Source::Node(mm.id.clone()), mm_value);
        for (t, v) in writes {
            state.insert(Source::Written { node: coll.id.clone(), tensor: t }, v);
        }
        state.insert(Source::Node(coll.id.clone()), coll_value);
        Ok(())
    }

    async fn run_rank(&self, ctx: &RankCtx) -> Result<RankOut> {
        let p = self.p;
        let mut state: State = HashMap::new();
        for (name, t) in &self.inputs.ranks[ctx.rank] {
            let Some(d) = p.tensor(name) else { continue };
            let Some(g) = view_of(p, d.group, ctx.rank) else { continue };
            let info = ValueInfo { shape: d.shape.clone(), layout: d.layout, elem: d.elem, group: d.group };
            state.insert(Source::Tensor(name.clone()), Stored { region: region_of(&info, g.q, g.size), data: t.data.clone() });
        }
        for (i, step) in self.plan.steps.iter().enumerate() {
            let node = p.node(&step.id).ok_or_else(|| RuntimeError::Invalid(format!("unknown step {}", step.id)))?;
            self.run_node(ctx, &mut state, node).await.map_err(|e| match e {
                RuntimeError::Step { .. } | RuntimeError::Aborted | RuntimeError::Deadlock => e,
                e => RuntimeError::Step { step: i, message: e.to_string() },
            })?;
        }
        let outputs = p.outputs.iter().map(|o| state.get(&Source::Node(o.clone())).cloned()).collect();
        let final_state = p
            .final_writers()
            .into_iter()
            .map(|(t, w)| state.get(&Source::Written { node: w, tensor: t }).cloned())
            .collect();
        Ok(RankOut { outputs, state: final_state })
    }
}

fn assemble(p: &Program, info: &ValueInfo, per_rank: &[&Option<Stored>], what: &str) -> Result<Logical> {
    let g = p.group(info.group).ok_or_else(|| RuntimeError::Invalid(format!("group of {what}")))?;
    let blocks: Vec<&Stored> = g
        .ranks()
        .map(|r| per_rank[r].as_ref().ok_or_else(|| RuntimeError::Invalid(format!("{what} missing on rank {r}"))))
        .collect::<Result<_>>()?;
    let shape = info.shape.clone();
    Ok(match info.layout {
        Layout::Replicated => Logical::Global(Tensor::new(shape, blocks[0].data.clone())),
        Layout::Sliced(d) => {
            let ts: Vec<Tensor> = blocks.iter().map(|b| Tensor::new(b.region.local_shape(), b.data.clone())).collect();
            Logical::Global(Tensor::concat(&ts, d))
        }
        Layout::Local => Logical::PerRank(blocks.iter().map(|b| Tensor::new(shape.clone(), b.data.clone())).collect()),
    })
}

fn check_inputs(p: &Program, inputs: &RankInputs) -> Result<()> {
    let world = p.world_size();
    if inputs.ranks.len() != world {
        return Err(RuntimeError::ShapeMismatch(format!("inputs for {} ranks, program has {world}", inputs.ranks.len())));
    }
    for d in &p.tensors {
        let Some(g) = p.group(d.group) else { continue };
        let info = ValueInfo { shape: d.shape.clone(), layout: d.layout, elem: d.elem, group: d.group };
        let mut first: Option<&Tensor> = None;
        for r in g.ranks() {
            let t = inputs.ranks[r].get(&d.name).ok_or_else(|| RuntimeError::MissingInput(format!("{} on rank {r}", d.name)))?;
            let expect = region_of(&info, r - g.first_rank, g.size).numel();
            if t.data.len() != expect {
                return Err(RuntimeError::ShapeMismatch(format!(
                    "{} on rank {r} has {} elements, expected {expect}",
                    d.name,
                    t.data.len()
                )));
            }
            if d.layout == Layout::Replicated {
                match first {
                    Some(f) if f.data.iter().zip(&t.data).any(|(a, b)| a.to_bits() != b.to_bits()) => {
                        return Err(RuntimeError::ReplicationViolation(d.name.clone()));
                    }
                    None => first = Some(t),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Executes a plan on per-rank inputs.
pub fn execute(
    p: &Program,
    pl: &ExecutionPlan,
    cfg: &CommConfig,
    inputs: &RankInputs,
    seed: u64,
    mode: ExecMode,
) -> Result<RunReport> {
    let diags = validate_program(p);
    if has_errors(&diags) {
        let first = diags.iter().find(|d| d.severity == Severity::Error).expect("has errors");
        return Err(RuntimeError::Invalid(first.to_string()));
    }
    for g in &p.groups {
        cfg.check(g.size)?;
    }
    check_inputs(p, inputs)?;
    let env = Env {
        p,
        plan: pl,
        cfg,
        inputs,
        seed,
        slots: p.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i as u32)).collect(),
    };
    let start = Instant::now();
    let ranks = run_ranks(p.world_size(), mode, async |ctx: &RankCtx| env.run_rank(ctx).await)?;
    let wall_time = start.elapsed().as_secs_f64();

    let outs: Vec<&RankOut> = ranks.iter().map(|(o, _)| o).collect();
    let mut outputs = Vec::new();
    let mut digests = Vec::new();
    for (i, id) in p.outputs.iter().enumerate() {
        let node = p.node(id).ok_or_else(|| RuntimeError::Invalid(format!("output {id}")))?;
        let per_rank: Vec<&Option<Stored>> = outs.iter().map(|o| &o.outputs[i]).collect();
        let v = assemble(p, &node.info, &per_rank, id)?;
        digests.push(OutputDigest {
            name: id.clone(),
            shape: node.info.shape.clone(),
            layout: node.info.layout.to_string(),
            sha256: hex(&Sha256::digest(v.bytes())),
        });
        outputs.push((id.clone(), v));
    }
    let mut state = Vec::new();
    for (i, (t, w)) in p.final_writers().into_iter().enumerate() {
        let info = p.node(&w).and_then(|n| n.writes.iter().find(|(x, _)| *x == t)).map(|(_, i)| i.clone()).expect("writer");
        let per_rank: Vec<&Option<Stored>> = outs.iter().map(|o| &o.state[i]).collect();
        state.push((t.clone(), assemble(p, &info, &per_rank, &t)?));
    }
    let tensor_elems = p
        .tensors
        .iter()
        .map(|d| {
            let info = ValueInfo { shape: d.shape.clone(), layout: d.layout, elem: d.elem, group: d.group };
            let per_rank = (0..p.world_size())
                .map(|r| view_of(p, d.group, r).map_or(0, |g| region_of(&info, g.q, g.size).numel()))
                .collect();
            (d.name.clone(), per_rank)
        })
        .collect();
    Ok(RunReport {
        program: p.name.clone(),
        ranks: p.world_size(),
        plan: pl.steps.clone(),
        steps: pl.steps.len(),
        kernel_steps: pl.kernel_steps(),
        simulated_time: program_time(p, &pl.steps, cfg),
        wall_time,
        comm_bytes: ranks.iter().map(|(_, c)| c.comm_bytes).collect(),
        p2p_bytes: ranks.iter().map(|(_, c)| c.p2p_bytes).collect(),
        memory_bytes: ranks.iter().map(|(_, c)| c.memory_bytes).collect(),
        tensor_elems,
        outputs: digests,
        deviation: None,
        results: Results { outputs, state },
        rank_outputs: ranks.into_iter().map(|(o, _)| o.outputs).collect::<Vec<_>>(),
    })
}

/// Plans and executes a program on logical inputs.
pub fn execute_program(
    p: &Program,
    cfg: &CommConfig,
    inputs: &LogicalInputs,
    seed: u64,
    mode: ExecMode,
) -> Result<RunReport> {
    let pl = plan(p);
    execute(p, &pl, cfg, &localize(p, inputs), seed, mode)
}

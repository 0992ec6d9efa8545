//! Ring collectives run by one rank.
//!
//! Data flows from local rank `q` to `q - 1`. Channels are independent ring
//! instances over disjoint chunks; tiles are processed one after another.

use std::ops::Range;

use super::chunk::ChunkMap;
use super::comm::{RankCtx, Tag};
use super::RuntimeError;
use crate::program::Reducer;

/// A rank's position inside its process group.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupView {
    pub first: usize,
    pub size: usize,
    pub q: usize,
}

impl GroupView {
    pub fn global(&self, local: usize) -> usize {
        self.first + local % self.size
    }

    fn prev(&self) -> usize {
        self.global(self.q + self.size - 1)
    }

    fn next(&self) -> usize {
        self.global(self.q + 1)
    }
}

/// Message tag for (step, phase, tile, channel, round).
fn tag(step: usize, sub: u32, map: &ChunkMap, tile: usize, ch: usize, k: usize) -> Tag {
    let seq = ((tile * map.channels + ch) * map.parts().max(1) + k) as u64;
    Tag::new(step, sub, seq)
}

fn send(ctx: &RankCtx, dst: usize, t: Tag, payload: Vec<f32>, bw: usize) {
    ctx.add_comm((payload.len() * bw) as u64);
    ctx.send(dst, t, payload);
}

/// Reduce-scatter. `own(segment, range)` yields this rank's contribution for
/// the packed `range` of `segment`. Returns segment `q`, fully reduced.
#[allow(clippy::too_many_arguments)]
pub(crate) async fn reduce_scatter(
    ctx: &RankCtx,
    g: GroupView,
    map: &ChunkMap,
    reducer: Reducer,
    bw: usize,
    step: usize,
    sub: u32,
    own: &mut dyn FnMut(usize, Range<usize>) -> Vec<f32>,
) -> Result<Vec<f32>, RuntimeError> {
    let w = g.size;
    let q = g.q;
    let mut out = vec![0.0f32; map.seg.segments[q].len()];
    if w == 1 {
        for tile in 0..map.tiles {
            let r = map.tile_range(0, tile);
            let v = own(0, r.clone());
            out[r].copy_from_slice(&v);
        }
        return Ok(out);
    }
    for tile in 0..map.tiles {
        let s0 = (q + 1) % w;
        for ch in 0..map.channels {
            let v = own(s0, map.range(s0, tile, ch));
            send(ctx, g.prev(), tag(step, sub, map, tile, ch, 0), v, bw);
        }
        for k in 0..w - 1 {
            let s = (q + 2 + k) % w;
            for ch in 0..map.channels {
                let r = map.range(s, tile, ch);
                let incoming = ctx.recv(g.next(), tag(step, sub, map, tile, ch, k)).await?;
                let mine = own(s, r.clone());
                if incoming.len() != mine.len() {
                    return Err(RuntimeError::ShapeMismatch(format!(
                        "rank {} received {} elements for a {}-element chunk",
                        ctx.rank,
                        incoming.len(),
                        mine.len()
                    )));
                }
                let acc: Vec<f32> = incoming.iter().zip(&mine).map(|(&a, &b)| reducer.apply(a, b)).collect();
                if k + 2 < w {
                    send(ctx, g.prev(), tag(step, sub, map, tile, ch, k + 1), acc, bw);
                } else {
                    out[r].copy_from_slice(&acc);
                }
            }
        }
    }
    Ok(out)
}

/// All-gather into `buf` (the full unpacked tensor), starting from this
/// rank's packed segment `mine`.
#[allow(clippy::too_many_arguments)]
pub(crate) async fn all_gather(
    ctx: &RankCtx,
    g: GroupView,
    map: &ChunkMap,
    bw: usize,
    step: usize,
    sub: u32,
    mine: &[f32],
    buf: &mut [f32],
) -> Result<(), RuntimeError> {
    let w = g.size;
    let q = g.q;
    map.seg.segments[q].unpack(buf, 0, mine);
    for tile in 0..map.tiles {
        for k in 0..w.saturating_sub(1) {
            let s_out = (q + k) % w;
            let s_in = (q + 1 + k) % w;
            for ch in 0..map.channels {
                let r = map.range(s_out, tile, ch);
                send(ctx, g.prev(), tag(step, sub, map, tile, ch, k), map.seg.segments[s_out].pack(buf, r), bw);
                let r = map.range(s_in, tile, ch);
                let data = ctx.recv(g.next(), tag(step, sub, map, tile, ch, k)).await?;
                if data.len() != r.len() {
                    return Err(RuntimeError::ShapeMismatch(format!(
                        "rank {} received {} elements for a {}-element chunk",
                        ctx.rank,
                        data.len(),
                        r.len()
                    )));
                }
                map.seg.segments[s_in].unpack(buf, r.start, &data);
            }
        }
    }
    Ok(())
}

/// Reduce-scatter followed by all-gather over the same chunk map.
pub(crate) async fn all_reduce(
    ctx: &RankCtx,
    g: GroupView,
    map: &ChunkMap,
    reducer: Reducer,
    bw: usize,
    step: usize,
    data: &[f32],
) -> Result<Vec<f32>, RuntimeError> {
    let mut own = |s: usize, r: Range<usize>| map.seg.segments[s].pack(data, r);
    let mine = reduce_scatter(ctx, g, map, reducer, bw, step, 0, &mut own).await?;
    let mut buf = vec![0.0f32; data.len()];
    all_gather(ctx, g, map, bw, step, 1, &mine, &mut buf).await?;
    Ok(buf)
}

/// Reduction to `root`: reduce-scatter, then every rank sends its reduced
/// segment to the root. Non-root ranks return `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) async fn reduce(
    ctx: &RankCtx,
    g: GroupView,
    map: &ChunkMap,
    reducer: Reducer,
    bw: usize,
    step: usize,
    root: usize,
    data: &[f32],
) -> Result<Option<Vec<f32>>, RuntimeError> {
    let mut own = |s: usize, r: Range<usize>| map.seg.segments[s].pack(data, r);
    let mine = reduce_scatter(ctx, g, map, reducer, bw, step, 0, &mut own).await?;
    if g.q != root {
        send(ctx, g.global(root), Tag::new(step, 1, 0), mine, bw);
        return Ok(None);
    }
    let mut buf = vec![0.0f32; data.len()];
    for r in 0..g.size {
        let seg = &map.seg.segments[r];
        if r == root {
            seg.unpack(&mut buf, 0, &mine);
        } else {
            let part = ctx.recv(g.global(r), Tag::new(step, 1, 0)).await?;
            seg.unpack(&mut buf, 0, &part);
        }
    }
    Ok(Some(buf))
}

/// Broadcast from `root`: the root scatters segments, then all-gather.
/// `data` is only read on the root.
pub(crate) async fn broadcast(
    ctx: &RankCtx,
    g: GroupView,
    map: &ChunkMap,
    bw: usize,
    step: usize,
    root: usize,
    data: &[f32],
) -> Result<Vec<f32>, RuntimeError> {
    let mine = if g.q == root {
        for r in (0..g.size).filter(|&r| r != root) {
            let seg = &map.seg.segments[r];
            send(ctx, g.global(r), Tag::new(step, 0, 0), seg.pack(data, 0..seg.len()), bw);
        }
        let seg = &map.seg.segments[root];
        seg.pack(data, 0..seg.len())
    } else {
        ctx.recv(g.global(root), Tag::new(step, 0, 0)).await?
    };
    let mut buf = vec![0.0f32; data.len()];
    all_gather(ctx, g, map, bw, step, 1, &mine, &mut buf).await?;
    Ok(buf)
}

/// Exchanges one scalar per rank with every other rank of the group and
/// returns all of them in rank order.
pub(crate) async fn exchange_scalars(
    ctx: &RankCtx,
    g: GroupView,
    step: usize,
    sub: u32,
    mine: f32,
) -> Result<Vec<f32>, RuntimeError> {
    for r in (0..g.size).filter(|&r| r != g.q) {
        send(ctx, g.global(r), Tag::new(step, sub, 0), vec![mine], 4);
    }
    let mut all = Vec::with_capacity(g.size);
    for r in 0..g.size {
        if r == g.q {
            all.push(mine);
        } else {
            let v = ctx.recv(g.global(r), Tag::new(step, sub, 0)).await?;
            all.push(v[0]);
        }
    }
    Ok(all)
}

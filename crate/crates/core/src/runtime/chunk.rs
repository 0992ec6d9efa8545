use std::ops::Range;

use serde::Serialize;

/// One of the `W` segments a collective splits a tensor into, as a strided
/// rectangle of the row-major buffer: `rows` runs of `run` elements,
/// `row_stride` apart, starting at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub rows: usize,
    pub row_stride: usize,
    pub offset: usize,
    pub run: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.run
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Buffer index of the `i`-th packed element.
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        (i / self.run) * self.row_stride + self.offset + i % self.run
    }

    pub fn pack(&self, data: &[f32], range: Range<usize>) -> Vec<f32> {
        let mut out = Vec::with_capacity(range.len());
        let mut i = range.start;
        while i < range.end {
            let col = i % self.run;
            let take = (self.run - col).min(range.end - i);
            let at = self.index(i);
            out.extend_from_slice(&data[at..at + take]);
            i += take;
        }
        out
    }

    pub fn unpack(&self, data: &mut [f32], start: usize, values: &[f32]) {
        let mut i = start;
        let mut k = 0;
        while k < values.len() {
            let col = i % self.run;
            let take = (self.run - col).min(values.len() - k);
            let at = self.index(i);
            data[at..at + take].copy_from_slice(&values[k..k + take]);
            i += take;
            k += take;
        }
    }
}

/// Partition of a buffer into `W` segments; segment `q` ends up on rank `q`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
}

impl Segmentation {
    /// Equal blocks along `axis`; packing a block yields the row-major
    /// local block of a tensor sliced along that axis.
    pub fn along_axis(shape: &[usize], axis: usize, parts: usize) -> Segmentation {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let run = ext / parts * inner;
        let segments = (0..parts)
            .map(|q| Segment { rows: outer, row_stride: ext * inner, offset: q * run, run })
            .collect();
        Segmentation { segments }
    }

    /// Contiguous ranges of a flat buffer; sizes differ by at most one.
    pub fn flat(numel: usize, parts: usize) -> Segmentation {
        let segments = (0..parts)
            .map(|q| {
                let lo = q * numel / parts;
                let hi = (q + 1) * numel / parts;
                Segment { rows: 1, row_stride: numel, offset: lo, run: hi - lo }
            })
            .collect();
        Segmentation { segments }
    }

    /// Segmentation used by all-reduce: blocks of the last axis when they
    /// divide evenly, otherwise flat ranges.
    pub fn for_all_reduce(shape: &[usize], parts: usize) -> Segmentation {
        match shape.last() {
            Some(&e) if e % parts == 0 => Segmentation::along_axis(shape, shape.len() - 1, parts),
            _ => Segmentation::flat(shape.iter().product(), parts),
        }
    }

    pub fn parts(&self) -> usize {
        self.segments.len()
    }
}

/// One chunk: the elements of `segment` handled by `channel` in `tile`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Chunk {
    pub id: usize,
    pub tile: usize,
    pub segment: usize,
    pub channel: usize,
    /// Packed positions within the segment.
    pub range: Range<usize>,
}

/// Tiling of a segmented buffer into buffer tiles, per-rank shares and
/// per-channel chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChunkMap {
    pub seg: Segmentation,
    /// Elements of one segment covered by one buffer tile.
    pub tile_share: usize,
    pub tiles: usize,
    pub channels: usize,
}

impl ChunkMap {
    pub fn new(seg: Segmentation, tile_elems: usize, channels: usize) -> ChunkMap {
        let parts = seg.parts().max(1);
        let tile_share = (tile_elems / parts).max(1);
        let longest = seg.segments.iter().map(Segment::len).max().unwrap_or(0);
        let tiles = longest.div_ceil(tile_share);
        ChunkMap { seg, tile_share, tiles, channels: channels.max(1) }
    }

    pub fn parts(&self) -> usize {
        self.seg.parts()
    }

    /// Packed range of `segment` covered by `tile` (all channels).
    pub fn tile_range(&self, segment: usize, tile: usize) -> Range<usize> {
        let len = self.seg.segments[segment].len();
        let lo = (tile * self.tile_share).min(len);
        let hi = ((tile + 1) * self.tile_share).min(len);
        lo..hi
    }

    /// Packed range of `segment` moved by `channel` in `tile`.
    pub fn range(&self, segment: usize, tile: usize, channel: usize) -> Range<usize> {
        let r = self.tile_range(segment, tile);
        let n = r.len();
        r.start + n * channel / self.channels..r.start + n * (channel + 1) / self.channels
    }

    /// Number of producer/consumer chunks used by overlap (tile x segment).
    pub fn overlap_chunks(&self) -> usize {
        self.tiles * self.parts()
    }

    pub fn chunks(&self) -> Vec<Chunk> {
        let mut out = Vec::new();
        for tile in 0..self.tiles {
            for segment in 0..self.parts() {
                for channel in 0..self.channels {
                    let range = self.range(segment, tile, channel);
                    if !range.is_empty() {
                        out.push(Chunk { id: out.len(), tile, segment, channel, range });
                    }
                }
            }
        }
        out
    }
}

/// Order in which rank `rank` produces overlap chunks: a rotation starting
/// at its own index.
pub fn production_order(rank: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| (rank + i) % count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_partition_the_tensor() {
        let shape = [3, 8, 12];
        let seg = Segmentation::along_axis(&shape, 2, 4);
        let map = ChunkMap::new(seg, 16, 2);
        let mut seen = vec![0u8; 3 * 8 * 12];
        for c in map.chunks() {
            let s = &map.seg.segments[c.segment];
            for i in c.range.clone() {
                seen[s.index(i)] += 1;
            }
        }
        assert!(seen.iter().all(|&x| x == 1));
    }

    #[test]
    fn pack_matches_block_layout() {
        let data: Vec<f32> = (0..24).map(|x| x as f32).collect();
        let seg = Segmentation::along_axis(&[2, 4, 3], 1, 2);
        let s1 = seg.segments[1];
        assert_eq!(s1.pack(&data, 0..s1.len()), vec![6., 7., 8., 9., 10., 11., 18., 19., 20., 21., 22., 23.]);
        let mut back = vec![0.0; 24];
        s1.unpack(&mut back, 2, &s1.pack(&data, 2..9));
        assert_eq!(&back[8..12], &[8., 9., 10., 11.]);
        assert_eq!(&back[18..21], &[18., 19., 20.]);
    }

    #[test]
    fn rotation_from_own_index() {
        let order = production_order(3, 16);
        assert_eq!(order[..3], [3, 4, 5]);
        assert_eq!(order[13..], [0, 1, 2]);
    }
}

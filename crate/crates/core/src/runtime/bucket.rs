//! Scattered tensors: many tensors handled by one collective through a
//! table of fixed-capacity buckets.

use serde::Serialize;

use super::collectives::{Collective, CollectiveRun};
use super::{CommConfig, RuntimeError};
use crate::program::Reducer;
use crate::value::Tensor;

pub const BUCKET_CAPACITY: usize = 1 << 10;

/// Bytes of bookkeeping per bucket: an 8-byte tensor address and a 4-byte offset.
pub const BUCKET_METADATA_BYTES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Bucket {
    /// Index of the member tensor.
    pub tensor: usize,
    /// Element offset inside that tensor.
    pub offset: usize,
    pub len: usize,
    /// Round-robin assignment index; chunk `i` of a collective goes to channel `i % channels`.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketTable {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub buckets: Vec<Bucket>,
    pub capacity: usize,
}

impl BucketTable {
    pub fn total_elems(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn metadata_bytes(&self) -> usize {
        BUCKET_METADATA_BYTES * self.buckets.len()
    }

    pub fn channel_of(&self, bucket: usize, channels: usize) -> usize {
        self.buckets[bucket].index % channels.max(1)
    }
}

/// Metadata bytes for `n` elements split into full buckets.
pub fn metadata_bytes(n: u64) -> u64 {
    BUCKET_METADATA_BYTES as u64 * n.div_ceil(BUCKET_CAPACITY as u64)
}

/// Splits each tensor into buckets of at most [`BUCKET_CAPACITY`] elements.
/// Buckets never span two tensors.
pub fn build_bucket_table(tensors: &[(&str, usize)]) -> BucketTable {
    let mut buckets = Vec::new();
    for (t, &(_, n)) in tensors.iter().enumerate() {
        let mut offset = 0;
        while offset < n {
            let len = BUCKET_CAPACITY.min(n - offset);
            buckets.push(Bucket { tensor: t, offset, len, index: buckets.len() });
            offset += len;
        }
    }
    BucketTable {
        names: tensors.iter().map(|(n, _)| n.to_string()).collect(),
        sizes: tensors.iter().map(|&(_, n)| n).collect(),
        buckets,
        capacity: BUCKET_CAPACITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    AllReduce,
    Broadcast { root: usize },
}

/// Outputs of a scattered collective: `tensors[rank][member]`.
#[derive(Debug, Clone)]
pub struct ScatteredRun {
    pub tensors: Vec<Vec<Tensor>>,
    pub run: CollectiveRun,
}

/// Runs one collective over every member tensor of `table` at once.
/// `inputs[rank][member]` holds each rank's member tensors.
pub fn scattered_collective(
    cfg: &CommConfig,
    table: &BucketTable,
    inputs: &[Vec<Tensor>],
    kind: CollectiveKind,
    reducer: Reducer,
    fused_expr: Option<&str>,
) -> Result<ScatteredRun, RuntimeError> {
    let w = inputs.len();
    let n = table.total_elems();
    if w == 0 || !n.is_multiple_of(w) {
        return Err(RuntimeError::Divisibility(format!("{n} scattered elements over {w} ranks")));
    }
    let mut staged = Vec::with_capacity(w);
    for (r, members) in inputs.iter().enumerate() {
        if members.len() != table.sizes.len() || members.iter().zip(&table.sizes).any(|(t, &s)| t.data.len() != s) {
            return Err(RuntimeError::ShapeMismatch(format!("rank {r} members do not match the bucket table")));
        }
        let mut buf = Vec::with_capacity(n);
        for b in &table.buckets {
            buf.extend_from_slice(&members[b.tensor].data[b.offset..b.offset + b.len]);
        }
        staged.push(Tensor::new(vec![n], buf));
    }
    let c = Collective::new(cfg);
    let run = match (kind, fused_expr) {
        (CollectiveKind::AllReduce, None) => c.all_reduce(&staged, reducer)?,
        (CollectiveKind::AllReduce, Some(e)) => c.fused_all_reduce(&staged, reducer, e, &[])?,
        (CollectiveKind::Broadcast { root }, None) => c.broadcast(&staged, root)?,
        (CollectiveKind::Broadcast { .. }, Some(_)) => {
            return Err(RuntimeError::Invalid("only all-reduce can carry a fused computation".into()))
        }
    };
    let tensors = run
        .outputs
        .iter()
        .zip(inputs)
        .map(|(out, members)| {
            let mut res: Vec<Tensor> = members.to_vec();
            let mut at = 0;
            for b in &table.buckets {
                res[b.tensor].data[b.offset..b.offset + b.len].copy_from_slice(&out.data[at..at + b.len]);
                at += b.len;
            }
            res
        })
        .collect();
    Ok(ScatteredRun { tensors, run })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(build_bucket_table(&[("a", 2048)]).buckets.len(), 2);
        let t = build_bucket_table(&[("a", 1000), ("b", 25)]);
        assert_eq!(t.buckets.iter().map(|b| b.len).collect::<Vec<_>>(), vec![1000, 25]);
        assert_eq!(t.metadata_bytes(), 24);
        let n = 334_000_000u64;
        let ratio = metadata_bytes(n) as f64 / (2 * n) as f64;
        assert!((ratio - 0.00586).abs() < 1e-4);
    }

    #[test]
    fn scattered_matches_members() {
        let cfg = CommConfig { buffer_tile_elems: 16, ..CommConfig::default() };
        let table = build_bucket_table(&[("a", 3), ("b", 1)]);
        let inputs: Vec<Vec<Tensor>> = (0..2)
            .map(|r| vec![Tensor::new(vec![3], vec![r as f32; 3]), Tensor::new(vec![1], vec![10.0 * (r + 1) as f32])])
            .collect();
        let out = scattered_collective(&cfg, &table, &inputs, CollectiveKind::AllReduce, Reducer::Sum, None).unwrap();
        assert_eq!(out.tensors[0][0].data, vec![1.0; 3]);
        assert_eq!(out.tensors[1][1].data, vec![30.0]);
        assert_eq!(out.run.report.kernel_steps, 1);
    }
}

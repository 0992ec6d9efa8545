//! Logical tensor values and numeric comparison.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(x: f32) -> Tensor {
        Tensor { shape: Vec::new(), data: vec![x] }
    }

    /// Block `index` of `parts` along `axis`, row-major.
    pub fn block(&self, axis: usize, index: usize, parts: usize) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let run = ext / parts * inner;
        let mut data = Vec::with_capacity(outer * run);
        for o in 0..outer {
            let start = o * ext * inner + index * run;
            data.extend_from_slice(&self.data[start..start + run]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = ext / parts;
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::block`]: concatenates blocks along `axis`.
    pub fn concat(blocks: &[Tensor], axis: usize) -> Tensor {
        let first = &blocks[0];
        let outer: usize = first.shape[..axis].iter().product();
        let run: usize = first.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(run * outer * blocks.len());
        for o in 0..outer {
            for b in blocks {
                data.extend_from_slice(&b.data[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] *= blocks.len();
        Tensor { shape, data }
    }
}

/// A value as the whole program sees it: one tensor for replicated and
/// sliced values, one tensor per rank of the group for local values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Logical {
    Global(Tensor),
    PerRank(Vec<Tensor>),
}

impl Logical {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Logical::Global(t) => vec![t],
            Logical::PerRank(ts) => ts.iter().collect(),
        }
    }

    /// Tensor seen by local rank `r`.
    pub fn at(&self, r: usize) -> &Tensor {
        match self {
            Logical::Global(t) => t,
            Logical::PerRank(ts) => &ts[r],
        }
    }

    /// Little-endian bytes of every element, rank by rank.
    pub fn bytes(&self) -> Vec<u8> {
        self.tensors().iter().flat_map(|t| t.data.iter().flat_map(|x| x.to_le_bytes())).collect()
    }
}

/// Largest absolute difference relative to the largest magnitude in either
/// tensor. Shape disagreement yields infinity.
pub fn deviation(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 1e-12f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        if x.is_nan() != y.is_nan() {
            return f64::INFINITY;
        }
        if x.is_nan() {
            continue;
        }
        if x.is_infinite() || y.is_infinite() {
            if x != y {
                return f64::INFINITY;
            }
            continue;
        }
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    diff / scale
}

/// Deviation between two logical values; differing kinds compare as infinite.
pub fn logical_deviation(a: &Logical, b: &Logical) -> f64 {
    match (a, b) {
        (Logical::Global(x), Logical::Global(y)) if x.shape == y.shape => deviation(&x.data, &y.data),
        (Logical::PerRank(xs), Logical::PerRank(ys)) if xs.len() == ys.len() => xs
            .iter()
            .zip(ys)
            .map(|(x, y)| if x.shape == y.shape { deviation(&x.data, &y.data) } else { f64::INFINITY })
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_examples() {
        assert!((deviation(&[1.0], &[1.0 + 1e-7]) - 1.19e-7).abs() < 1e-8);
        assert_eq!(deviation(&[1.0], &[2.0]), 0.5);
        assert_eq!(deviation(&[2.0], &[1.0]), 0.5);
        assert_eq!(deviation(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(deviation(&[1.0], &[1.0, 2.0]), f64::INFINITY);
    }

    #[test]
    fn block_concat_round_trip() {
        let t = Tensor::new(vec![2, 4, 3], (0..24).map(|x| x as f32).collect());
        for axis in 0..3 {
            let parts = if t.shape[axis].is_multiple_of(2) { 2 } else { t.shape[axis] };
            let blocks: Vec<Tensor> = (0..parts).map(|i| t.block(axis, i, parts)).collect();
            assert_eq!(Tensor::concat(&blocks, axis), t);
        }
    }
}

//! Columnar evaluation of kernel statements over a region of a tensor.
//!
//! A [`Region`] is either a whole tensor or one equal block of it along an
//! axis. Operands are read by global coordinate, so a replicated operand can
//! feed a sliced computation without copying, and a dropout mask depends only
//! on the global flat index of the element.

use std::borrow::Cow;

use crate::prng::dropout_scale;
use crate::program::{BinOp, Expr, Reducer};

/// One block of a tensor: block `index` of `parts` equal blocks along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub axis: usize,
    pub index: usize,
    pub parts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Region {
    pub global: Vec<usize>,
    pub block: Option<Block>,
}

impl Region {
    pub fn full(global: &[usize]) -> Region {
        Region { global: global.to_vec(), block: None }
    }

    pub fn block(global: &[usize], axis: usize, index: usize, parts: usize) -> Region {
        Region { global: global.to_vec(), block: Some(Block { axis, index, parts }) }
    }

    pub fn local_shape(&self) -> Vec<usize> {
        let mut s = self.global.clone();
        if let Some(b) = self.block {
            s[b.axis] /= b.parts;
        }
        s
    }

    pub fn numel(&self) -> usize {
        self.local_shape().iter().product()
    }

    /// Global coordinate offset of the block's first element.
    pub fn origin(&self) -> Vec<usize> {
        let mut o = vec![0; self.global.len()];
        if let Some(b) = self.block {
            o[b.axis] = b.index * (self.global[b.axis] / b.parts);
        }
        o
    }

    /// Global flat (row-major) index of every element of the region, in
    /// local row-major order.
    pub fn global_flat_indices(&self) -> Vec<u64> {
        let local = self.local_shape();
        let origin = self.origin();
        let mut strides = vec![1u64; self.global.len()];
        for i in (0..self.global.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.global[i + 1] as u64;
        }
        let n: usize = local.iter().product();
        let mut out = Vec::with_capacity(n);
        let mut coord = vec![0usize; local.len()];
        for _ in 0..n {
            out.push(coord.iter().zip(&origin).zip(&strides).map(|((c, o), s)| (c + o) as u64 * s).sum());
            for ax in (0..local.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < local[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        out
    }
}

/// A stored value: physical data covering `region`.
#[derive(Debug, Clone, Copy)]
pub struct ValueRef<'r, 'a> {
    pub region: &'r Region,
    pub data: &'a [f32],
}

/// A column of values: either one scalar broadcast everywhere or one value
/// per element of the evaluation region.
#[derive(Debug, Clone)]
pub enum Col<'a> {
    S(f32),
    V(Cow<'a, [f32]>),
}

impl Col<'_> {
    pub fn into_vec(self, n: usize) -> Vec<f32> {
        match self {
            Col::S(x) => vec![x; n],
            Col::V(v) => v.into_owned(),
        }
    }

    fn map(self, f: impl Fn(f32) -> f32) -> Col<'static> {
        match self {
            Col::S(x) => Col::S(f(x)),
            Col::V(v) => Col::V(Cow::Owned(v.iter().map(|&x| f(x)).collect())),
        }
    }
}

fn zip(a: Col<'_>, b: Col<'_>, f: impl Fn(f32, f32) -> f32) -> Col<'static> {
    match (a, b) {
        (Col::S(x), Col::S(y)) => Col::S(f(x, y)),
        (Col::S(x), Col::V(v)) => Col::V(Cow::Owned(v.iter().map(|&y| f(x, y)).collect())),
        (Col::V(v), Col::S(y)) => Col::V(Cow::Owned(v.iter().map(|&x| f(x, y)).collect())),
        (Col::V(v), Col::V(w)) => Col::V(Cow::Owned(v.iter().zip(w.iter()).map(|(&x, &y)| f(x, y)).collect())),
    }
}

/// Reads `v` at every element of `out`, broadcasting by trailing alignment.
pub fn gather<'a>(v: ValueRef<'_, 'a>, out: &Region) -> Col<'a> {
    if v.data.len() == 1 && v.region.numel() == 1 {
        return Col::S(v.data[0]);
    }
    if v.region == out {
        return Col::V(Cow::Borrowed(v.data));
    }
    let local_v = v.region.local_shape();
    let origin_v = v.region.origin();
    let r_out = out.global.len();
    let r_v = local_v.len();
    let phys: Vec<usize> = (0..r_v).map(|j| local_v[j + 1..].iter().product()).collect();
    // Per output axis: source stride (0 when broadcast) and source offset.
    let mut stride = vec![0usize; r_out];
    let mut offset = vec![0usize; r_out];
    for i in 0..r_out {
        if i + r_v < r_out {
            continue;
        }
        let j = i + r_v - r_out;
        if v.region.global[j] == 1 {
            continue;
        }
        stride[i] = phys[j];
        offset[i] = origin_v[j];
    }
    let local = out.local_shape();
    let origin = out.origin();
    let n: usize = local.iter().product();
    let mut res = Vec::with_capacity(n);
    let mut coord = vec![0usize; r_out];
    let index = |coord: &[usize]| -> usize {
        let mut idx = 0;
        for i in 0..r_out {
            if stride[i] != 0 {
                idx += (coord[i] + origin[i] - offset[i]) * stride[i];
            }
        }
        idx
    };
    if r_out == 0 {
        return Col::S(v.data[0]);
    }
    let last = r_out - 1;
    for _ in 0..n / local[last].max(1) {
        let base = {
            coord[last] = 0;
            index(&coord)
        };
        let s = stride[last];
        for k in 0..local[last] {
            res.push(v.data[base + k * s]);
        }
        for ax in (0..last).rev() {
            coord[ax] += 1;
            if coord[ax] < local[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    Col::V(Cow::Owned(res))
}

/// Evaluation context for one statement.
pub struct StmtCtx<'a, 'b> {
    pub region: &'b Region,
    pub seed: u64,
    /// Resolves `Operand`, `Member` and `InFlight` leaves.
    pub leaf: &'b dyn Fn(&Expr) -> Col<'a>,
}

fn eval_expr<'a>(e: &Expr, ctx: &StmtCtx<'a, '_>, flat: &mut Option<Vec<u64>>) -> Col<'a> {
    match e {
        Expr::Const(c) => Col::S(*c),
        Expr::Operand(_) | Expr::Member(_) | Expr::InFlight => (ctx.leaf)(e),
        Expr::Unary(op, a) => {
            let op = *op;
            eval_expr(a, ctx, flat).map(move |x| op.apply(x))
        }
        Expr::Binary(op, a, b) => {
            let op = *op;
            let x = eval_expr(a, ctx, flat);
            let y = eval_expr(b, ctx, flat);
            match op {
                BinOp::Add => zip(x, y, |a, b| a + b),
                BinOp::Sub => zip(x, y, |a, b| a - b),
                BinOp::Mul => zip(x, y, |a, b| a * b),
                BinOp::Div => zip(x, y, |a, b| a / b),
                BinOp::Pow => zip(x, y, f32::powf),
            }
        }
        Expr::Dropout { input, rate, key } => {
            let n = ctx.region.numel();
            let x = eval_expr(input, ctx, flat).into_vec(n);
            let idx = flat.get_or_insert_with(|| ctx.region.global_flat_indices());
            let (seed, key, rate) = (ctx.seed, *key, *rate);
            Col::V(Cow::Owned(x.iter().zip(idx.iter()).map(|(&v, &i)| v * dropout_scale(seed, key, i, rate)).collect()))
        }
        Expr::Norm(_) | Expr::Reduce(..) => panic!("reductions are only valid at statement level"),
    }
}

/// Element-wise value of an expression over `ctx.region`.
pub fn eval_elementwise(e: &Expr, ctx: &StmtCtx<'_, '_>) -> Vec<f32> {
    let mut flat = None;
    eval_expr(e, ctx, &mut flat).into_vec(ctx.region.numel())
}

/// Reduction kinds at statement level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Norm,
    Plain(Reducer),
}

impl ReduceKind {
    pub fn of(e: &Expr) -> Option<(ReduceKind, &Expr)> {
        match e {
            Expr::Norm(b) => Some((ReduceKind::Norm, b)),
            Expr::Reduce(r, b) => Some((ReduceKind::Plain(*r), b)),
            _ => None,
        }
    }

    /// Partial over local elements (sum of squares for a norm).
    pub fn partial(self, xs: &[f32]) -> f32 {
        match self {
            ReduceKind::Norm => xs.iter().fold(0.0, |a, &x| a + x * x),
            ReduceKind::Plain(Reducer::Sum) => xs.iter().fold(0.0, |a, &x| a + x),
            ReduceKind::Plain(Reducer::Max) => xs.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x)),
            ReduceKind::Plain(Reducer::Min) => xs.iter().fold(f32::INFINITY, |a, &x| a.min(x)),
        }
    }

    /// Combines partials in the given order.
    pub fn combine(self, partials: &[f32]) -> f32 {
        let r = match self {
            ReduceKind::Norm => Reducer::Sum,
            ReduceKind::Plain(r) => r,
        };
        let mut it = partials.iter().copied();
        let first = it.next().unwrap_or(0.0);
        it.fold(first, |a, x| r.apply(a, x))
    }

    pub fn finish(self, combined: f32) -> f32 {
        match self {
            ReduceKind::Norm => combined.sqrt(),
            ReduceKind::Plain(_) => combined,
        }
    }
}

/// Row-major matrix product of the trailing two axes: `a` is `[.., m, k]`
/// (flattened to `rows x k`), `b` is `[k, n]`.
pub fn matmul(a: &[f32], b: &[f32], rows: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * n];
    for r in 0..rows {
        for c in 0..n {
            out[r * n + c] = matmul_elem(a, b, k, n, r, c);
        }
    }
    out
}

/// One output element of [`matmul`]; the accumulation order is fixed so that
/// tile-by-tile production reproduces the full product bit for bit.
#[inline]
pub fn matmul_elem(a: &[f32], b: &[f32], k: usize, n: usize, r: usize, c: usize) -> f32 {
    let row = &a[r * k..(r + 1) * k];
    let mut acc = 0.0f32;
    for (i, &x) in row.iter().enumerate() {
        acc += x * b[i * n + c];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_broadcasts_and_slices() {
        let full = Region::full(&[2, 4]);
        let data: Vec<f32> = (0..8).map(|x| x as f32).collect();
        let v = ValueRef { region: &full, data: &data };
        let blk = Region::block(&[2, 4], 1, 1, 2);
        assert_eq!(gather(v, &blk).into_vec(4), vec![2.0, 3.0, 6.0, 7.0]);

        let bias_r = Region::full(&[4]);
        let bias = [10.0, 11.0, 12.0, 13.0];
        let b = ValueRef { region: &bias_r, data: &bias };
        assert_eq!(gather(b, &blk).into_vec(4), vec![12.0, 13.0, 12.0, 13.0]);

        let sliced_r = Region::block(&[2, 4], 1, 1, 2);
        let s = [2.0, 3.0, 6.0, 7.0];
        let sv = ValueRef { region: &sliced_r, data: &s };
        assert_eq!(gather(sv, &blk).into_vec(4), s.to_vec());
    }

    #[test]
    fn flat_indices_of_block() {
        let blk = Region::block(&[2, 4], 1, 1, 2);
        assert_eq!(blk.global_flat_indices(), vec![2, 3, 6, 7]);
        let blk0 = Region::block(&[4, 2], 0, 1, 2);
        assert_eq!(blk0.global_flat_indices(), vec![4, 5, 6, 7]);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }
}

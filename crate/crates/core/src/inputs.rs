//! Deterministic input generation.
//!
//! Values are generated per logical tensor, so a replicated declaration and
//! a sliced declaration of the same name see the same numbers.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prng::splitmix64;
use crate::program::json::fnv1a;
use crate::program::{InitSpec, Layout, Program, TensorDecl};
use crate::value::{Logical, Tensor};

pub type LogicalInputs = BTreeMap<String, Logical>;

/// Physical per-rank inputs: `ranks[r][name]` is the local block rank `r` holds.
#[derive(Debug, Clone, Default)]
pub struct RankInputs {
    pub ranks: Vec<HashMap<String, Tensor>>,
}

fn fill(decl: &TensorDecl, seed: u64, stream: u64) -> Tensor {
    let n = decl.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(decl.name.as_bytes())) ^ splitmix64(stream));
    let data = match decl.init.clone().unwrap_or(InitSpec::Uniform(-1.0, 1.0)) {
        InitSpec::Const(c) => vec![c; n],
        InitSpec::Uniform(lo, hi) => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        InitSpec::Int(lo, hi) => (0..n).map(|_| rng.gen_range(lo..=hi) as f32).collect(),
    };
    Tensor::new(decl.shape.clone(), data)
}

/// Logical input values of every declared tensor.
pub fn generate(p: &Program, seed: u64) -> LogicalInputs {
    p.tensors
        .iter()
        .map(|d| {
            let v = match d.layout {
                Layout::Local => {
                    let size = p.group(d.group).map_or(1, |g| g.size);
                    Logical::PerRank((0..size).map(|r| fill(d, seed, r as u64 + 1)).collect())
                }
                _ => Logical::Global(fill(d, seed, 0)),
            };
            (d.name.clone(), v)
        })
        .collect()
}

/// Splits logical inputs into the physical blocks each rank holds.
pub fn localize(p: &Program, inputs: &LogicalInputs) -> RankInputs {
    let mut ranks = vec![HashMap::new(); p.world_size()];
    for d in &p.tensors {
        let Some(v) = inputs.get(&d.name) else { continue };
        let Some(g) = p.group(d.group) else { continue };
        for rank in g.ranks() {
            let q = rank - g.first_rank;
            let t = match (d.layout, v) {
                (Layout::Sliced(axis), Logical::Global(t)) => t.block(axis, q, g.size),
                (_, Logical::Global(t)) => t.clone(),
                (_, Logical::PerRank(ts)) => ts[q].clone(),
            };
            ranks[rank].insert(d.name.clone(), t);
        }
    }
    RankInputs { ranks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::json::{program_from_str, Bindings};

    const P: &str = r#"{"name":"t","groups":[{"id":0,"size":2}],
      "tensors":[{"name":"a","elem":"F32","shape":[4],"layout":{"kind":"Sliced","dim":0},"group":0},
                 {"name":"b","elem":"F32","shape":[4],"layout":{"kind":"Replicated"},"group":0},
                 {"name":"c","elem":"F32","shape":[2],"layout":{"kind":"Local"},"group":0,"init":{"int":[-3,3]}}],
      "nodes":[{"id":"x","kind":"pointwise","attrs":{"expr":"a + b"}}],"outputs":["x"]}"#;

    #[test]
    fn layout_independent_values() {
        let p = program_from_str(P, &Bindings::new(2)).unwrap();
        let v = generate(&p, 3);
        let ranks = localize(&p, &v);
        let Logical::Global(a) = &v["a"] else { panic!() };
        assert_eq!(ranks.ranks[1]["a"].data, a.data[2..].to_vec());
        let Logical::PerRank(c) = &v["c"] else { panic!() };
        assert_ne!(c[0], c[1]);
        assert!(c[0].data.iter().all(|x| x.fract() == 0.0 && x.abs() <= 3.0));
        assert_eq!(generate(&p, 3), v);
    }
}

//! Distributed tensor programs: declarations, operations and the dataflow graph.
//!
//! A [`Program`] is an immutable DAG of [`OpNode`]s over declared input
//! tensors. Every node carries the value information (shape, layout, element
//! type, owning process group) produced by layout inference; transformations
//! rebuild programs rather than mutate them in place.

mod canon;
mod expr;
mod infer;
pub mod json;
mod validate;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use canon::{canonical_form, node_signatures};
pub use expr::{parse_expr, BinOp, Expr, Kernel, ParseError, Stmt, UnOp};
pub use infer::{broadcast_shapes, infer_layout, infer_node, infer_program, kernel_infos, LayoutError, LayoutRule, StmtInfo};
pub use validate::{has_errors, topo_order, validate_program, DiagCode, Diagnostic, Severity};

pub type NodeId = String;
pub type Shape = Vec<usize>;

/// Element type of a tensor. Values are always computed in 32-bit floats; the
/// tag only drives byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ElemType {
    F16,
    F32,
}

impl ElemType {
    pub fn byte_width(self) -> usize {
        match self {
            ElemType::F16 => 2,
            ElemType::F32 => 4,
        }
    }

    pub fn widest(self, other: ElemType) -> ElemType {
        self.max(other)
    }
}

/// Distribution of a tensor across the ranks of its process group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layout {
    /// Equally partitioned along an axis; rank `q` of the group holds block `q`.
    Sliced(usize),
    /// Identical value on every rank.
    Replicated,
    /// Same shape on every rank, different values.
    Local,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Sliced(d) => write!(f, "Sliced({d})"),
            Layout::Replicated => write!(f, "Replicated"),
            Layout::Local => write!(f, "Local"),
        }
    }
}

/// A contiguous range of ranks acting as one collective domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProcessGroup {
    pub id: usize,
    pub size: usize,
    pub first_rank: usize,
}

impl ProcessGroup {
    pub fn ranks(&self) -> std::ops::Range<usize> {
        self.first_rank..self.first_rank + self.size
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.ranks().contains(&rank)
    }

    /// Position of a global rank inside this group.
    pub fn local_rank(&self, rank: usize) -> Option<usize> {
        self.contains(rank).then(|| rank - self.first_rank)
    }
}

/// How an input tensor is initialised when inputs are generated from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    Const(f32),
    Uniform(f32, f32),
    Int(i32, i32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDecl {
    pub name: String,
    pub elem: ElemType,
    pub shape: Shape,
    pub layout: Layout,
    pub group: usize,
    pub init: Option<InitSpec>,
}

impl TensorDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }
}

/// Where an operand's value comes from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    /// A declared input tensor (its value before any update).
    Tensor(String),
    /// The primary result of a node.
    Node(NodeId),
    /// The value a node writes into tensor storage through an update.
    Written { node: NodeId, tensor: String },
}

/// A reference to a value, optionally viewed as the local slice along an
/// axis. Slice views are index remappings only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Operand {
    pub source: Source,
    pub slice: Option<usize>,
}

impl Operand {
    pub fn node(id: impl Into<String>) -> Operand {
        Operand { source: Source::Node(id.into()), slice: None }
    }

    pub fn tensor(name: impl Into<String>) -> Operand {
        Operand { source: Source::Tensor(name.into()), slice: None }
    }

    pub fn written(node: impl Into<String>, tensor: impl Into<String>) -> Operand {
        Operand {
            source: Source::Written { node: node.into(), tensor: tensor.into() },
            slice: None,
        }
    }

    /// Node this operand depends on, if any.
    pub fn node_dep(&self) -> Option<&str> {
        match &self.source {
            Source::Node(id) | Source::Written { node: id, .. } => Some(id),
            Source::Tensor(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match &self.source {
            Source::Tensor(t) => t.clone(),
            Source::Node(n) => n.clone(),
            Source::Written { node, tensor } => format!("{node}@{tensor}"),
        };
        match self.slice {
            Some(axis) => write!(f, "slice({base}, {axis})"),
            None => f.write_str(&base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reducer {
    #[serde(rename = "+")]
    Sum,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "min")]
    Min,
}

impl Reducer {
    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            Reducer::Sum => a + b,
            Reducer::Max => a.max(b),
            Reducer::Min => a.min(b),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Reducer::Sum => "+",
            Reducer::Max => "max",
            Reducer::Min => "min",
        }
    }

    pub fn parse(s: &str) -> Option<Reducer> {
        match s {
            "+" | "sum" => Some(Reducer::Sum),
            "max" => Some(Reducer::Max),
            "min" => Some(Reducer::Min),
            _ => None,
        }
    }
}

/// Peer addressing for point-to-point transfers: `GroupRank(GROUP + offset, RANK)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PeerSpec {
    pub group_offset: i64,
}

impl PeerSpec {
    pub fn parse(s: &str) -> Option<PeerSpec> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let inner = compact.strip_prefix("GroupRank(")?.strip_suffix(",RANK)")?;
        let rest = inner.strip_prefix("GROUP")?;
        let group_offset = if rest.is_empty() {
            0
        } else if let Some(n) = rest.strip_prefix('+') {
            n.parse().ok()?
        } else {
            let n = rest.strip_prefix('-')?;
            -n.parse::<i64>().ok()?
        };
        Some(PeerSpec { group_offset })
    }

    /// Group reached from `group`, if it exists among `group_count` groups.
    pub fn target_group(&self, group: usize, group_count: usize) -> Option<usize> {
        let g = group as i64 + self.group_offset;
        (0..group_count as i64).contains(&g).then_some(g as usize)
    }
}

impl fmt::Display for PeerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.group_offset {
            0 => write!(f, "GroupRank(GROUP, RANK)"),
            o if o > 0 => write!(f, "GroupRank(GROUP+{o}, RANK)"),
            o => write!(f, "GroupRank(GROUP-{}, RANK)", -o),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul { lhs: Operand, rhs: Operand },
    /// Pointwise computation (possibly several fused statements, updates, and
    /// tensor reductions).
    Compute(Kernel),
    AllReduce { reducer: Reducer, input: Operand },
    ReduceScatter { reducer: Reducer, input: Operand, axis: Option<usize> },
    /// `restores` names a replicated tensor whose storage receives the gathered value.
    AllGather { input: Operand, restores: Option<String> },
    Reduce { reducer: Reducer, input: Operand, root: usize },
    Broadcast { input: Operand, root: usize, restores: Option<String> },
    /// Point-to-point send of the payload kernel's result; a payload that is a
    /// bare operand is a plain send, anything else is a fused send.
    Send { payload: Kernel, dest: PeerSpec },
    Recv { input: Operand, src: PeerSpec },
    /// Reduce-scatter, computation on the reduced slice (`Expr::InFlight`),
    /// then all-gather of the last statement.
    FusedAllReduce { reducer: Reducer, input: Operand, kernel: Kernel, axis: Option<usize>, restores: Option<String> },
    /// Members execute concurrently at chunk granularity.
    Overlap { members: Vec<NodeId> },
}

impl Op {
    /// Short kind tag, stable across versions (used in JSON and reports).
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Compute(k) if k.stmts.len() > 1 => "fused_computation",
            Op::Compute(k) if k.stmts[0].update.is_some() => "update",
            Op::Compute(_) => "pointwise",
            Op::AllReduce { .. } => "all_reduce",
            Op::ReduceScatter { .. } => "reduce_scatter",
            Op::AllGather { .. } => "all_gather",
            Op::Reduce { .. } => "reduce",
            Op::Broadcast { .. } => "broadcast",
            Op::Send { payload, .. } if payload.is_identity() => "send",
            Op::Send { .. } => "fused_send",
            Op::Recv { .. } => "recv",
            Op::FusedAllReduce { .. } => "fused_all_reduce",
            Op::Overlap { .. } => "overlap",
        }
    }

    pub fn is_communication(&self) -> bool {
        matches!(
            self,
            Op::AllReduce { .. }
                | Op::ReduceScatter { .. }
                | Op::AllGather { .. }
                | Op::Reduce { .. }
                | Op::Broadcast { .. }
                | Op::Send { .. }
                | Op::Recv { .. }
                | Op::FusedAllReduce { .. }
        )
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, Op::Compute(_))
    }

    /// Operands read by this op, in a fixed order.
    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Op::MatMul { lhs, rhs } => vec![lhs, rhs],
            Op::Compute(k) => k.operands(),
            Op::AllReduce { input, .. }
            | Op::ReduceScatter { input, .. }
            | Op::AllGather { input, .. }
            | Op::Reduce { input, .. }
            | Op::Broadcast { input, .. }
            | Op::Recv { input, .. } => vec![input],
            Op::Send { payload, .. } => payload.operands(),
            Op::FusedAllReduce { input, kernel, .. } => {
                let mut v = vec![input];
                v.extend(kernel.operands());
                v
            }
            Op::Overlap { .. } => Vec::new(),
        }
    }

    /// Rewrites every operand in place.
    pub fn map_operands(&mut self, f: &mut dyn FnMut(&mut Operand)) {
        match self {
            Op::MatMul { lhs, rhs } => {
                f(lhs);
                f(rhs);
            }
            Op::Compute(k) => k.map_operands(f),
            Op::AllReduce { input, .. }
            | Op::ReduceScatter { input, .. }
            | Op::AllGather { input, .. }
            | Op::Reduce { input, .. }
            | Op::Broadcast { input, .. }
            | Op::Recv { input, .. } => f(input),
            Op::Send { payload, .. } => payload.map_operands(f),
            Op::FusedAllReduce { input, kernel, .. } => {
                f(input);
                kernel.map_operands(f);
            }
            Op::Overlap { .. } => {}
        }
    }

    /// Nodes this op depends on (including overlap members).
    pub fn node_deps(&self) -> BTreeSet<NodeId> {
        let mut deps: BTreeSet<NodeId> =
            self.operands().into_iter().filter_map(|o| o.node_dep().map(str::to_string)).collect();
        if let Op::Overlap { members } = self {
            deps.extend(members.iter().cloned());
        }
        deps
    }
}

/// Shape, layout, element type and process group of a value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValueInfo {
    pub shape: Shape,
    pub layout: Layout,
    pub elem: ElemType,
    pub group: usize,
}

impl ValueInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub id: NodeId,
    pub op: Op,
    /// Filled by inference.
    pub info: ValueInfo,
    /// Tensor storage this node overwrites, with the layout of the written value.
    pub writes: Vec<(String, ValueInfo)>,
}

impl OpNode {
    pub fn new(id: impl Into<String>, op: Op) -> OpNode {
        OpNode {
            id: id.into(),
            op,
            info: ValueInfo { shape: Vec::new(), layout: Layout::Replicated, elem: ElemType::F32, group: 0 },
            writes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub name: String,
    pub groups: Vec<ProcessGroup>,
    pub tensors: Vec<TensorDecl>,
    pub nodes: Vec<OpNode>,
    pub outputs: Vec<NodeId>,
}

impl Program {
    pub fn world_size(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    pub fn group(&self, id: usize) -> Option<&ProcessGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut TensorDecl> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut OpNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Value information of an operand (slice views report the sliced layout).
    pub fn operand_info(&self, op: &Operand) -> Option<ValueInfo> {
        let mut info = match &op.source {
            Source::Tensor(t) => {
                let d = self.tensor(t)?;
                ValueInfo { shape: d.shape.clone(), layout: d.layout, elem: d.elem, group: d.group }
            }
            Source::Node(n) => self.node(n)?.info.clone(),
            Source::Written { node, tensor } => {
                self.node(node)?.writes.iter().find(|(t, _)| t == tensor)?.1.clone()
            }
        };
        if let Some(axis) = op.slice {
            info.layout = Layout::Sliced(axis);
        }
        Some(info)
    }

    /// Ids of nodes reading `id` (through any operand kind or overlap membership).
    pub fn consumers(&self, id: &str) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.op.node_deps().contains(id))
            .map(|n| n.id.clone())
            .collect()
    }

    /// Consumers that read the node's primary value (not just its writes).
    pub fn value_consumers(&self, id: &str) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| {
                n.op.operands().iter().any(|o| matches!(&o.source, Source::Node(x) if x == id))
            })
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn is_output(&self, id: &str) -> bool {
        self.outputs.iter().any(|o| o == id)
    }

    /// Overlap group containing a node, if any.
    pub fn group_of_member(&self, id: &str) -> Option<&OpNode> {
        self.nodes
            .iter()
            .find(|n| matches!(&n.op, Op::Overlap { members } if members.iter().any(|m| m == id)))
    }

    /// Every identifier in use: node ids, tensor names, and statement names
    /// inside kernels.
    pub fn used_names(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        names.extend(self.tensors.iter().map(|t| t.name.clone()));
        for n in &self.nodes {
            let kernel = match &n.op {
                Op::Compute(k) => Some(k),
                Op::Send { payload, .. } => Some(payload),
                Op::FusedAllReduce { kernel, .. } => Some(kernel),
                _ => None,
            };
            if let Some(k) = kernel {
                names.extend(k.stmts.iter().map(|s| s.name.clone()));
            }
        }
        names
    }

    /// A fresh identifier derived from `base`.
    pub fn fresh_id(&self, base: &str) -> NodeId {
        let used = self.used_names();
        if !used.contains(base) {
            return base.to_string();
        }
        (2..).map(|i| format!("{base}_{i}")).find(|c| !used.contains(c)).expect("unbounded")
    }

    /// Nodes writing `tensor`, in topological order.
    pub fn writers_of(&self, tensor: &str) -> Vec<NodeId> {
        let order = topo_order(self);
        order
            .into_iter()
            .filter(|id| self.node(id).is_some_and(|n| n.writes.iter().any(|(t, _)| t == tensor)))
            .collect()
    }

    /// Tensors written anywhere in the program, with their final writer.
    pub fn final_writers(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for t in &self.tensors {
            if let Some(last) = self.writers_of(&t.name).pop() {
                out.push((t.name.clone(), last));
            }
        }
        out
    }

    /// Number of communication nodes (outside overlap containers).
    pub fn communication_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_communication()).count()
    }
}

//! Multi-rank simulator: chunked ring collectives, fused collectives,
//! chunk-level overlap, scattered tensors, and a simulated alpha-beta clock.

pub mod bucket;
pub mod chunk;
pub mod collectives;
pub mod comm;
pub mod cost;
pub mod exec;
pub mod plan;
mod ring;
pub mod tensor_io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bucket::{build_bucket_table, scattered_collective, Bucket, BucketTable, CollectiveKind};
pub use chunk::{production_order, Chunk, ChunkMap, Segment, Segmentation};
pub use collectives::{fused_all_reduce, p2p_send_recv, ring_all_gather, ring_all_reduce, ring_reduce_scatter, Collective};
pub use comm::{Counters, ExecMode};
pub use cost::{pipeline_time, step_time, Resource, Stage};
pub use exec::{execute, execute_program, OutputDigest, RunReport};
pub use plan::{plan, ExecutionPlan, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Low latency, half the bandwidth.
    LowLatency,
    #[default]
    Simple,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Protocol> {
        match s.to_ascii_lowercase().as_str() {
            "ll" | "low_latency" => Some(Protocol::LowLatency),
            "simple" => Some(Protocol::Simple),
            _ => None,
        }
    }

    /// Multipliers applied to (alpha, beta).
    pub fn scale(self) -> (f64, f64) {
        match self {
            Protocol::LowLatency => (0.25, 0.5),
            Protocol::Simple => (1.0, 1.0),
        }
    }
}

/// Channel, tiling and cost parameters. Times are simulated microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    pub channels: usize,
    pub buffer_tile_elems: usize,
    pub protocol: Protocol,
    /// Per-message latency.
    pub alpha: f64,
    /// Bytes per microsecond.
    pub beta: f64,
    /// Element operations per microsecond.
    pub gamma: f64,
    /// Launch overhead per kernel step.
    pub lambda: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig {
            channels: 2,
            buffer_tile_elems: 1 << 16,
            protocol: Protocol::Simple,
            alpha: 1.0,
            beta: 1000.0,
            gamma: 2000.0,
            lambda: 1.0,
        }
    }
}

impl CommConfig {
    pub fn check(&self, world: usize) -> Result<(), RuntimeError> {
        if self.channels == 0 {
            return Err(RuntimeError::Config("channels must be at least 1".into()));
        }
        let unit = self.channels * world.max(1);
        if self.buffer_tile_elems == 0 || !self.buffer_tile_elems.is_multiple_of(unit) {
            return Err(RuntimeError::Config(format!(
                "buffer tile of {} elements is not divisible by {} channels x {} ranks",
                self.buffer_tile_elems, self.channels, world
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 || (v == 0.0 && matches!(name, "beta" | "gamma")) {
                return Err(RuntimeError::Config(format!("{name} = {v} is out of range")));
            }
        }
        Ok(())
    }

    /// Effective (alpha, beta) after the protocol preset.
    pub fn link(&self) -> (f64, f64) {
        let (a, b) = self.protocol.scale();
        (self.alpha * a, self.beta * b)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("replicated input {0} differs across ranks")]
    ReplicationViolation(String),
    #[error("missing input {0}")]
    MissingInput(String),
    #[error("no such rank: {0}")]
    NoSuchRank(String),
    #[error("operand layout mismatch: {0}")]
    OperandLayoutMismatch(String),
    #[error("not divisible: {0}")]
    Divisibility(String),
    #[error("step {step}: {message}")]
    Step { step: usize, message: String },
    #[error("ranks deadlocked")]
    Deadlock,
    #[error("aborted by a failing peer")]
    Aborted,
}

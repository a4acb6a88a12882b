use thiserror::Error;

use crate::graph::VertexId;
use crate::region::ChannelKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid partitioning: {0}")]
    Partition(String),

    #[error("unknown vertex {0}")]
    UnknownVertex(VertexId),

    #[error("vertex {vertex} is not owned by node {node}")]
    NotOwned { vertex: VertexId, node: usize },

    #[error("endpoint {0} is neither owned nor mirrored locally")]
    Unresolved(VertexId),

    #[error("lifecycle violation: {0}")]
    Lifecycle(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("channel key {0} is not bound")]
    UnboundChannel(ChannelKey),

    #[error("block of {len} items exceeds slot capacity {capacity}")]
    CapacityExceeded { len: usize, capacity: usize },

    #[error("unknown operation code {0}")]
    UnknownOp(u8),

    #[error("invalid accelerator profile: {0}")]
    Profile(String),

    #[error("invalid cost model: {0}")]
    CostModel(String),

    #[error("no interior optimum: a = 0 and k2 dominates, fall back to an integer sweep")]
    NoInteriorOptimum,

    #[error("invalid balance problem: {0}")]
    Balance(String),

    #[error("under-determined fit: {0}")]
    UnderDetermined(String),

    #[error("barrier `{barrier}` timed out waiting for node(s) {stragglers:?}")]
    BarrierTimeout {
        barrier: String,
        stragglers: Vec<usize>,
    },

    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("missing vote from node {0}")]
    MissingVote(usize),

    #[error("node {0} published its query list twice in one round")]
    DoublePublish(usize),

    #[error("node {node} uploaded {vertex}, which is not in the global query queue")]
    UnqueriedUpload { node: usize, vertex: VertexId },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

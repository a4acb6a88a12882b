//! Daemon-agent middleware that plugs simulated accelerators into a small
//! partitioned iterative graph engine.
//!
//! Each node of the engine runs an [`agent::Agent`] that feeds its
//! [`daemon::Daemon`]s blocks of edge triplets through three rotating
//! buffers in a [`region::SharedRegion`]. Between iterations the agents
//! synchronize through a weighted cache with lazy uploading
//! ([`sync`]), and may skip a round when every change stayed inside its
//! partition. [`pipeline`] and [`balancer`] hold the analytic planners for
//! block size and per-node data share.

pub mod agent;
pub mod algo;
pub mod balancer;
pub mod daemon;
pub mod engine;
pub mod error;
pub mod generate;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod region;
pub mod sync;

pub use agent::{Agent, AgentConfig, AgentPhase, BlockPolicy, Direction, PassRecord};
pub use algo::{
    program_for, run_reference, AlgoKind, AttributeValue, LabelPropagation, Message, MessageSet,
    PageRank, Payload, ReferenceRun, Sssp, VertexProgram,
};
pub use balancer::{
    balance_capacity, balance_data, calibrate, even_split, makespan, optimal_makespan,
    BalanceProblem, Calibration, CalibrationSample,
    CapacityProblem,
};
pub use daemon::{AcceleratorProfile, DaemonHost, DaemonPhase, DaemonReport};
pub use engine::{calibrate_nodes, run, ComputationModel, EngineConfig, RunOutcome};
pub use error::{Error, Result};
pub use generate::{generate, GraphKind};
pub use graph::{load_edge_list, parse_edge_list, write_edge_list, Edge, Graph, VertexId};
pub use metrics::{IterationRecord, RunMetrics, RunSummary};
pub use pipeline::{optimal_block_size, plan, total_time, BlockPlan, PipelineCostModel, PlanMethod};
pub use sync::{CacheConfig, RoundLog};

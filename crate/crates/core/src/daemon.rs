//! Daemons: long-lived simulated accelerators.
//!
//! A daemon is initialized once, then serves compute requests on its shared
//! region until it is shut down. Each request works on the buffer currently
//! labelled Compute and writes its result back into that same buffer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algo::{merge_into, Message, Payload, VertexProgram, VertexUpdate};
use crate::error::{Error, Result};
use crate::graph::{EdgeTriplet, VertexId};
use crate::pipeline::{rotate, Role};
use crate::region::{
    ApplyItem, ChannelKey, ChannelRegistry, ControlKind, ControlMessage, OpKind, SharedRegion,
    SlotData,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorProfile {
    /// Parallel width.
    pub lanes: usize,
    /// Simulated time per item.
    pub per_unit_cost: f64,
    /// Simulated fixed cost per block dispatch.
    pub call_overhead: f64,
}

impl AcceleratorProfile {
    pub fn cpu_like() -> Self {
        AcceleratorProfile {
            lanes: 20,
            per_unit_cost: 0.5,
            call_overhead: 20.0,
        }
    }

    pub fn gpu_like() -> Self {
        AcceleratorProfile {
            lanes: 1024,
            per_unit_cost: 0.05,
            call_overhead: 200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 {
            return Err(Error::Profile("lanes must be at least 1".into()));
        }
        if !(self.per_unit_cost.is_finite() && self.per_unit_cost >= 0.0) {
            return Err(Error::Profile(format!(
                "per_unit_cost must be finite and >= 0, got {}",
                self.per_unit_cost
            )));
        }
        if !(self.call_overhead.is_finite() && self.call_overhead >= 0.0) {
            return Err(Error::Profile(format!(
                "call_overhead must be finite and >= 0, got {}",
                self.call_overhead
            )));
        }
        Ok(())
    }

    /// Simulated cost of computing one block of `items`.
    pub fn compute_cost(&self, items: usize) -> f64 {
        self.call_overhead + self.per_unit_cost * items as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DaemonPhase {
    Uninitialized = 0,
    Ready = 1,
    Computing = 2,
    Terminated = 3,
}

impl DaemonPhase {
    fn from_u8(v: u8) -> DaemonPhase {
        match v {
            0 => DaemonPhase::Uninitialized,
            1 => DaemonPhase::Ready,
            2 => DaemonPhase::Computing,
            _ => DaemonPhase::Terminated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DaemonState {
    pub phase: DaemonPhase,
    pub channel_key: ChannelKey,
}

/// Counters observable while the daemon runs on its own thread.
#[derive(Debug, Default)]
pub struct DaemonStatus {
    phase: AtomicU8,
    init_count: AtomicU64,
    blocks: AtomicU64,
    items: AtomicU64,
    compute_cost: Mutex<f64>,
}

impl DaemonStatus {
    pub fn phase(&self) -> DaemonPhase {
        DaemonPhase::from_u8(self.phase.load(Ordering::Acquire))
    }

    fn set_phase(&self, p: DaemonPhase) {
        self.phase.store(p as u8, Ordering::Release);
    }

    pub fn init_count(&self) -> u64 {
        self.init_count.load(Ordering::Acquire)
    }

    pub fn blocks(&self) -> u64 {
        self.blocks.load(Ordering::Acquire)
    }

    pub fn items(&self) -> u64 {
        self.items.load(Ordering::Acquire)
    }

    pub fn compute_cost(&self) -> f64 {
        *self.compute_cost.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaemonReport {
    pub node: usize,
    pub key: ChannelKey,
    pub init_count: u64,
    pub blocks: u64,
    pub items: u64,
    pub compute_cost: f64,
    pub copies: u64,
    pub final_phase: DaemonPhase,
    /// Per-pass protocol traces, when recording was enabled.
    pub traces: Vec<String>,
}

pub struct Daemon {
    profile: AcceleratorProfile,
    program: Arc<dyn VertexProgram>,
    key: ChannelKey,
    status: Arc<DaemonStatus>,
    region: Option<Arc<SharedRegion>>,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Daemon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Daemon")
            .field("key", &self.key)
            .field("profile", &self.profile)
            .field("phase", &self.status.phase())
            .finish_non_exhaustive()
    }
}

impl Daemon {
    pub fn new(profile: AcceleratorProfile, program: Arc<dyn VertexProgram>, key: ChannelKey) -> Self {
        Daemon {
            profile,
            program,
            key,
            status: Arc::new(DaemonStatus::default()),
            region: None,
            pool: None,
        }
    }

    /// Binds the channel and spawns the lane workers. Allowed once.
    pub fn init(&mut self, registry: &ChannelRegistry) -> Result<DaemonState> {
        if self.status.phase() != DaemonPhase::Uninitialized || self.status.init_count() > 0 {
            return Err(Error::Lifecycle(format!(
                "daemon {} is already initialized",
                self.key
            )));
        }
        self.profile.validate()?;
        let region = registry.lookup(self.key)?;
        let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
        let workers = self.profile.lanes.min(hw);
        if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .thread_name({
                    let key = self.key;
                    move |i| format!("daemon-{}-lane-{i}", key.0)
                })
                .build()
                .map_err(|e| Error::Profile(format!("cannot start lane workers: {e}")))?;
            self.pool = Some(pool);
        }
        self.region = Some(region);
        self.status.init_count.fetch_add(1, Ordering::AcqRel);
        self.status.set_phase(DaemonPhase::Ready);
        Ok(self.state())
    }

    pub fn state(&self) -> DaemonState {
        DaemonState {
            phase: self.status.phase(),
            channel_key: self.key,
        }
    }

    pub fn status(&self) -> Arc<DaemonStatus> {
        self.status.clone()
    }

    pub fn profile(&self) -> &AcceleratorProfile {
        &self.profile
    }

    /// Runs one template operation over `data` with lane fan-out.
    pub fn execute(&self, op: OpKind, data: SlotData) -> Result<SlotData> {
        execute_request(
            self.program.as_ref(),
            self.profile.lanes,
            self.pool.as_ref(),
            op,
            data,
        )
    }

    /// Serves the control loop until `Shutdown`.
    pub fn run(self) -> Result<DaemonReport> {
        let region = match (&self.region, self.status.phase()) {
            (Some(r), DaemonPhase::Ready) => r.clone(),
            (_, phase) => {
                return Err(Error::Lifecycle(format!(
                    "daemon {} cannot serve in phase {phase:?}",
                    self.key
                )))
            }
        };
        let mut seq = 0u64;
        loop {
            let Ok(msg) = region.recv_at_daemon() else {
                // The agent side is gone; nothing left to serve.
                break;
            };
            seq += 1;
            match msg.kind {
                ControlKind::ExchangeFinished => {
                    rotate(&region);
                    region.send_to_agent(ControlMessage::new(ControlKind::RotateFinished, seq))?;
                    let reply = match self.compute_cycle(&region) {
                        Ok(true) => ControlMessage::new(ControlKind::ComputeFinished, seq),
                        Ok(false) => ControlMessage::new(ControlKind::ComputeAllFinished, seq),
                        Err(e) => ControlMessage {
                            kind: ControlKind::Fault,
                            seq,
                            detail: Some(e.to_string()),
                        },
                    };
                    region.send_to_agent(reply)?;
                }
                ControlKind::Shutdown => break,
                other => {
                    let detail = format!("daemon {} received unexpected {other:?}", self.key);
                    let _ = region.send_to_agent(ControlMessage {
                        kind: ControlKind::Fault,
                        seq,
                        detail: Some(detail.clone()),
                    });
                    self.status.set_phase(DaemonPhase::Terminated);
                    return Err(Error::Protocol(detail));
                }
            }
        }
        self.status.set_phase(DaemonPhase::Terminated);
        Ok(DaemonReport {
            node: 0,
            key: self.key,
            init_count: self.status.init_count(),
            blocks: self.status.blocks(),
            items: self.status.items(),
            compute_cost: self.status.compute_cost(),
            copies: region.copies(),
            final_phase: DaemonPhase::Terminated,
            traces: region.traces(),
        })
    }

    /// Computes the Compute-role buffer in place. Returns false when it is
    /// empty, which ends the pass.
    fn compute_cycle(&self, region: &SharedRegion) -> Result<bool> {
        let mut slot = region.slot(Role::Compute)?;
        if slot.is_empty() {
            return Ok(false);
        }
        self.status.set_phase(DaemonPhase::Computing);
        let result = (|| -> Result<usize> {
            let op = OpKind::try_from(region.op())?;
            let data = std::mem::take(&mut *slot);
            let n = data.len();
            *slot = self.execute(op, data)?;
            Ok(n)
        })();
        self.status.set_phase(DaemonPhase::Ready);
        let n = result?;
        self.status.blocks.fetch_add(1, Ordering::AcqRel);
        self.status.items.fetch_add(n as u64, Ordering::AcqRel);
        *self
            .status
            .compute_cost
            .lock()
            .unwrap_or_else(|p| p.into_inner()) += self.profile.compute_cost(n);
        Ok(true)
    }
}

fn fan_out<T, R, F>(pool: Option<&rayon::ThreadPool>, items: &[T], lanes: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync,
{
    let chunk = items.len().div_ceil(lanes.max(1)).max(1);
    match pool {
        Some(p) => p.install(|| items.par_chunks(chunk).map(&f).collect()),
        None => items.chunks(chunk).map(f).collect(),
    }
}

/// Executes `op` on one buffer's content. Work is split into `lanes`
/// contiguous chunks whose results are concatenated (or, for merge, folded)
/// in chunk order, so output never depends on scheduling.
pub fn execute_request(
    program: &dyn VertexProgram,
    lanes: usize,
    pool: Option<&rayon::ThreadPool>,
    op: OpKind,
    data: SlotData,
) -> Result<SlotData> {
    match (op, data) {
        (OpKind::Gen, SlotData::Triplets(ts)) => {
            let parts = fan_out(pool, &ts, lanes, |c: &[EdgeTriplet]| {
                c.iter().map(|t| program.gen(t)).collect::<Result<Vec<Message>>>()
            });
            let mut out = Vec::with_capacity(ts.len());
            for p in parts {
                out.extend(p?);
            }
            Ok(SlotData::Messages(out))
        }
        (OpKind::Merge, SlotData::Messages(ms)) => {
            let parts = fan_out(pool, &ms, lanes, |c: &[Message]| {
                let mut acc = BTreeMap::new();
                for m in c {
                    merge_into(program, &mut acc, m.target, m.payload.clone())?;
                }
                Ok::<_, Error>(acc)
            });
            let mut acc: BTreeMap<VertexId, Payload> = BTreeMap::new();
            for p in parts {
                for (id, payload) in p? {
                    merge_into(program, &mut acc, id, payload)?;
                }
            }
            Ok(SlotData::Merged(acc.into_iter().collect()))
        }
        (OpKind::Merge, SlotData::Empty) => Ok(SlotData::Merged(Vec::new())),
        (OpKind::Apply, SlotData::ApplyItems(items)) => {
            let parts = fan_out(pool, &items, lanes, |c: &[ApplyItem]| {
                c.iter()
                    .map(|it| {
                        let old = it.old.as_ref().ok_or(Error::NotOwned {
                            vertex: it.id,
                            node: usize::MAX,
                        })?;
                        program.apply(it.id, old, it.msg.as_ref())
                    })
                    .collect::<Result<Vec<VertexUpdate>>>()
            });
            let mut out = Vec::with_capacity(items.len());
            for p in parts {
                out.extend(p?);
            }
            Ok(SlotData::Applied(out))
        }
        (op, data) => Err(Error::Protocol(format!(
            "operation {op} cannot run on {} content",
            slot_kind(&data)
        ))),
    }
}

fn slot_kind(d: &SlotData) -> &'static str {
    match d {
        SlotData::Empty => "empty",
        SlotData::Triplets(_) => "triplet",
        SlotData::Messages(_) => "message",
        SlotData::Merged(_) => "merged",
        SlotData::ApplyItems(_) => "apply-item",
        SlotData::Applied(_) => "applied",
    }
}

/// Connection details of one running daemon.
#[derive(Clone, Debug)]
pub struct DaemonEndpoint {
    pub key: ChannelKey,
    pub region: Arc<SharedRegion>,
    pub profile: AcceleratorProfile,
    pub status: Arc<DaemonStatus>,
}

/// The daemons of one node. They are started and initialized once and keep
/// serving until [`DaemonHost::shutdown`], independent of how often agents
/// connect and disconnect.
pub struct DaemonHost {
    node_id: usize,
    registry: Arc<ChannelRegistry>,
    endpoints: Vec<DaemonEndpoint>,
    handles: Vec<JoinHandle<Result<DaemonReport>>>,
}

impl std::fmt::Debug for DaemonHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DaemonHost")
            .field("node_id", &self.node_id)
            .field("endpoints", &self.endpoints)
            .finish_non_exhaustive()
    }
}

impl DaemonHost {
    pub fn start(
        node_id: usize,
        profiles: &[AcceleratorProfile],
        program: Arc<dyn VertexProgram>,
        registry: Arc<ChannelRegistry>,
        capacity: usize,
        record_traces: bool,
    ) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::Config(format!("node {node_id} has no daemons")));
        }
        for p in profiles {
            p.validate()?;
        }
        let mut host = DaemonHost {
            node_id,
            registry: registry.clone(),
            endpoints: Vec::new(),
            handles: Vec::new(),
        };
        for (i, &profile) in profiles.iter().enumerate() {
            let region = registry.create(capacity, record_traces);
            let mut daemon = Daemon::new(profile, program.clone(), region.key());
            daemon.init(&registry)?;
            let status = daemon.status();
            let handle = std::thread::Builder::new()
                .name(format!("node{node_id}-daemon{i}"))
                .spawn(move || daemon.run())
                .map_err(Error::Io)?;
            host.endpoints.push(DaemonEndpoint {
                key: region.key(),
                region,
                profile,
                status,
            });
            host.handles.push(handle);
        }
        Ok(host)
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn endpoints(&self) -> &[DaemonEndpoint] {
        &self.endpoints
    }

    pub fn is_running(&self) -> bool {
        !self.handles.is_empty()
    }

    /// Stops every daemon and collects their reports.
    pub fn shutdown(&mut self) -> Result<Vec<DaemonReport>> {
        for ep in &self.endpoints {
            let _ = ep.region.send_to_daemon(ControlMessage::new(ControlKind::Shutdown, 0));
        }
        let mut reports = Vec::new();
        let mut first_err = None;
        for handle in self.handles.drain(..) {
            match handle.join() {
                Ok(Ok(mut r)) => {
                    r.node = self.node_id;
                    reports.push(r);
                }
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(Error::Aborted("daemon thread panicked".into()));
                }
            }
        }
        for ep in &self.endpoints {
            self.registry.unbind(ep.key);
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(reports),
        }
    }
}

impl Drop for DaemonHost {
    fn drop(&mut self) {
        if !self.handles.is_empty() {
            let _ = self.shutdown();
        }
    }
}

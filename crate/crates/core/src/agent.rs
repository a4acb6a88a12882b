//! Agents: one per node. An agent owns the node's tables and cache, talks to
//! the upper system, and drives its daemons through pipelined passes.
//!
//! The interface follows the call discipline
//! `connect -> update -> request* -> update -> disconnect`, repeated every
//! iteration against the same, still-running daemons.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::algo::{absorb, merge_into, ApplyOutcome, Message, MessageSet, Payload, VertexProgram};
use crate::daemon::{DaemonEndpoint, DaemonHost, DaemonReport};
use crate::error::{Error, Result};
use crate::graph::{apply_updates, build_blocks, Partition, TripletBlock, VertexId};
use crate::pipeline::{pipeline_schedule_time, plan, PipelineCostModel, Role, StageCost};
use crate::region::{
    pass_trace_conforms, ApplyItem, ChannelKey, ControlKind, ControlMessage, OpKind,
    SharedRegion, SlotData,
};
use crate::sync::{boundary_sources, need_list, AuthoritativeStore, CacheConfig, SyncCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentPhase {
    Disconnected,
    Connected,
    InIteration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Bring remote values this node needs into its tables.
    Pull,
    /// Hand this node's changed values to the upper system.
    Push,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockPolicy {
    /// Pick the block size per pass from the pipeline cost model.
    Auto,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub block_policy: BlockPolicy,
    /// Simulated download cost per item.
    pub download_cost: f64,
    /// Simulated upload cost per item.
    pub upload_cost: f64,
    pub cache: Option<CacheConfig>,
    /// How long to wait for a daemon reply before declaring it lost.
    pub reply_timeout: Duration,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            block_policy: BlockPolicy::Auto,
            download_cost: 0.02,
            upload_cost: 0.1,
            cache: None,
            reply_timeout: Duration::from_secs(60),
        }
    }
}

/// One pipelined pass as seen by the agent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub op: Option<OpKind>,
    pub items: usize,
    pub blocks: usize,
    pub block_size: usize,
    pub t_download: f64,
    pub t_compute: f64,
    pub t_upload: f64,
    /// Overlapped time, the slowest daemon's schedule.
    pub t_pipeline: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullStats {
    pub needed: u64,
    pub downloads: u64,
    pub hits: u64,
    pub misses: u64,
}

pub struct Agent {
    node_id: usize,
    phase: AgentPhase,
    links: Vec<DaemonEndpoint>,
    program: Arc<dyn VertexProgram>,
    cfg: AgentConfig,
    seq: u64,
    pub(crate) partition: Partition,
    pub(crate) frontier: BTreeSet<VertexId>,
    pub(crate) changed: BTreeSet<VertexId>,
    pub(crate) max_delta: f64,
    pub(crate) cache: Option<SyncCache>,
    /// Plain-path uploads waiting for the next synchronization round.
    pub(crate) staged: BTreeMap<VertexId, crate::algo::AttributeValue>,
    pub(crate) boundary: BTreeSet<VertexId>,
    pub(crate) passes: Vec<PassRecord>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("node_id", &self.node_id)
            .field("phase", &self.phase)
            .field("daemons", &self.links.len())
            .finish_non_exhaustive()
    }
}

impl Agent {
    pub fn new(
        partition: Partition,
        program: Arc<dyn VertexProgram>,
        cfg: AgentConfig,
    ) -> Result<Self> {
        if let Some(c) = &cfg.cache {
            c.validate()?;
        }
        for (name, k) in [("download", cfg.download_cost), ("upload", cfg.upload_cost)] {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::Config(format!("{name} cost must be finite and > 0, got {k}")));
            }
        }
        if let BlockPolicy::Fixed(0) = cfg.block_policy {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        let frontier = partition
            .vertices
            .keys()
            .copied()
            .filter(|&v| program.initially_active(v))
            .collect();
        let boundary = boundary_sources(&partition);
        Ok(Agent {
            node_id: partition.node_id,
            phase: AgentPhase::Disconnected,
            links: Vec::new(),
            program,
            cache: cfg.cache.map(SyncCache::new),
            cfg,
            seq: 0,
            partition,
            frontier,
            changed: BTreeSet::new(),
            max_delta: 0.0,
            staged: BTreeMap::new(),
            boundary,
            passes: Vec::new(),
        })
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn phase(&self) -> AgentPhase {
        self.phase
    }

    pub fn keys(&self) -> Vec<ChannelKey> {
        self.links.iter().map(|l| l.key).collect()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn into_partition(self) -> Partition {
        self.partition
    }

    pub fn frontier(&self) -> &BTreeSet<VertexId> {
        &self.frontier
    }

    pub fn cache(&self) -> Option<&SyncCache> {
        self.cache.as_ref()
    }

    /// Vertices that generate messages next.
    pub fn gen_frontier(&self) -> BTreeSet<VertexId> {
        if self.program.gen_from_all() {
            self.partition.vertices.keys().copied().collect()
        } else {
            self.frontier.clone()
        }
    }

    /// Attaches to the node's running daemons.
    pub fn connect(&mut self, host: &DaemonHost) -> Result<()> {
        if self.phase != AgentPhase::Disconnected {
            return Err(Error::Lifecycle(format!(
                "agent {} is already connected",
                self.node_id
            )));
        }
        if host.endpoints().is_empty() || !host.is_running() {
            return Err(Error::Lifecycle(format!(
                "node {} has no running daemons",
                self.node_id
            )));
        }
        self.links = host.endpoints().to_vec();
        self.phase = AgentPhase::Connected;
        Ok(())
    }

    pub fn disconnect(&mut self) -> Result<()> {
        if self.phase == AgentPhase::Disconnected {
            return Err(Error::Lifecycle(format!(
                "agent {} is not connected",
                self.node_id
            )));
        }
        self.links.clear();
        self.phase = AgentPhase::Disconnected;
        Ok(())
    }

    /// Disconnects if needed and stops the daemons.
    pub fn shutdown(&mut self, host: &mut DaemonHost) -> Result<Vec<DaemonReport>> {
        if self.phase != AgentPhase::Disconnected {
            self.disconnect()?;
        }
        host.shutdown()
    }

    fn require_connected(&self, what: &str) -> Result<()> {
        if self.phase == AgentPhase::Disconnected {
            return Err(Error::Lifecycle(format!(
                "agent {}: {what} before connect",
                self.node_id
            )));
        }
        Ok(())
    }

    fn link(&self, key: ChannelKey) -> Result<&DaemonEndpoint> {
        self.links
            .iter()
            .find(|l| l.key == key)
            .ok_or(Error::UnboundChannel(key))
    }

    /// Places `data` in the New buffer of region `key`.
    pub fn transfer(&self, data: SlotData, key: ChannelKey) -> Result<()> {
        self.require_connected("transfer")?;
        put_new(&self.link(key)?.region, data)
    }

    /// Pull: fetch the remote values the next generation step reads.
    /// Push: record changed owned values for the next synchronization.
    pub fn update(&mut self, direction: Direction, store: &AuthoritativeStore) -> Result<PullStats> {
        self.require_connected("update")?;
        match direction {
            Direction::Pull => self.pull(store),
            Direction::Push => {
                self.push();
                Ok(PullStats::default())
            }
        }
    }

    pub(crate) fn pull(&mut self, store: &AuthoritativeStore) -> Result<PullStats> {
        let need = need_list(&self.partition, &self.gen_frontier());
        let mut stats = PullStats {
            needed: need.len() as u64,
            ..PullStats::default()
        };
        for id in need {
            let attr = match &mut self.cache {
                Some(cache) => {
                    let before = cache.stats();
                    let version = store.version(id)?;
                    let a = cache.get(id, version, || store.get(id))?;
                    let after = cache.stats();
                    stats.hits += after.hits - before.hits;
                    stats.misses += after.misses - before.misses;
                    stats.downloads += after.misses - before.misses;
                    a
                }
                None => {
                    stats.downloads += 1;
                    store.get(id)?.0
                }
            };
            self.partition.mirror.insert(id, attr);
        }
        Ok(stats)
    }

    pub(crate) fn push(&mut self) {
        for &id in &self.changed {
            let attr = self.partition.vertices[&id].attr.clone();
            match &mut self.cache {
                Some(cache) => cache.update(id, attr),
                None => {
                    self.staged.insert(id, attr);
                }
            }
        }
    }

    fn block_size(&self, items: usize) -> Result<usize> {
        match self.cfg.block_policy {
            BlockPolicy::Fixed(b) => Ok(b),
            BlockPolicy::Auto => {
                if items == 0 {
                    return Ok(1);
                }
                let k = self.links.len().max(1);
                let per_daemon = items.div_ceil(k) as u64;
                let n = self.links.len().max(1) as f64;
                let k2 = self.links.iter().map(|l| l.profile.per_unit_cost).sum::<f64>() / n;
                let a = self.links.iter().map(|l| l.profile.call_overhead).sum::<f64>() / n;
                let model = PipelineCostModel::new(
                    self.cfg.download_cost,
                    k2.max(1e-9),
                    self.cfg.upload_cost,
                    a,
                    per_daemon,
                )?;
                Ok(plan(&model)?.b as usize)
            }
        }
    }

    /// Runs one pipelined pass of `op` over `blocks`, spread round-robin over
    /// the connected daemons. Results come back in block order.
    pub fn request(
        &mut self,
        op: OpKind,
        blocks: Vec<SlotData>,
        block_size: usize,
    ) -> Result<Vec<SlotData>> {
        self.require_connected("request")?;
        self.phase = AgentPhase::InIteration;
        let k = self.links.len();
        let items: usize = blocks.iter().map(SlotData::len).sum();
        let n_blocks = blocks.len();
        let mut per_daemon: Vec<Vec<SlotData>> = (0..k).map(|_| Vec::new()).collect();
        for (i, b) in blocks.into_iter().enumerate() {
            per_daemon[i % k].push(b);
        }
        self.seq += 1;
        let seq = self.seq;
        let cfg = self.cfg;
        let outcomes: Vec<Result<(Vec<SlotData>, Vec<StageCost>)>> = if k == 1 {
            let work = per_daemon.pop().expect("one daemon");
            vec![drive_pass(&self.links[0], op, work, block_size, seq, &cfg)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .links
                    .iter()
                    .zip(per_daemon)
                    .map(|(link, work)| s.spawn(move || drive_pass(link, op, work, block_size, seq, &cfg)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(Error::Aborted("pass thread panicked".into())))
                    })
                    .collect()
            })
        };
        let mut record = PassRecord {
            op: Some(op),
            items,
            blocks: n_blocks,
            block_size,
            ..PassRecord::default()
        };
        let mut results: Vec<std::vec::IntoIter<SlotData>> = Vec::with_capacity(k);
        for o in outcomes {
            let (res, costs) = o?;
            for c in &costs {
                record.t_download += c.download;
                record.t_compute += c.compute;
                record.t_upload += c.upload;
            }
            record.t_pipeline = record.t_pipeline.max(pipeline_schedule_time(&costs));
            results.push(res.into_iter());
        }
        self.passes.push(record);
        let mut ordered = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            ordered.push(results[i % k].next().ok_or_else(|| {
                Error::Protocol(format!("daemon {} returned too few blocks", i % k))
            })?);
        }
        Ok(ordered)
    }

    /// Gen over the current frontier. `audit` counts stale destination
    /// snapshots in the built blocks.
    pub fn request_gen(
        &mut self,
        audit: Option<&dyn Fn(&TripletBlock) -> u64>,
    ) -> Result<(Vec<Message>, u64)> {
        let frontier = self.gen_frontier();
        let n = self.partition.triplet_count(&frontier);
        let b = self.block_size(n)?;
        let blocks = build_blocks(&self.partition, &frontier, b)?;
        let stale = audit.map_or(0, |f| blocks.iter().map(f).sum());
        let blocks = blocks
            .into_iter()
            .map(|b| SlotData::Triplets(b.triplets))
            .collect();
        let mut out = Vec::with_capacity(n);
        for r in self.request(OpKind::Gen, blocks, b)? {
            match r {
                SlotData::Messages(m) => out.extend(m),
                other => return Err(unexpected(OpKind::Gen, &other)),
            }
        }
        Ok((out, stale))
    }

    /// Merge of messages addressed to this node.
    pub fn request_merge(&mut self, mut messages: Vec<Message>) -> Result<MessageSet> {
        messages.sort_by_key(|m| m.target);
        let b = self.block_size(messages.len())?;
        let mut blocks = Vec::with_capacity(messages.len().div_ceil(b));
        let mut rest = messages.into_iter().peekable();
        while rest.peek().is_some() {
            blocks.push(SlotData::Messages(rest.by_ref().take(b).collect()));
        }
        let mut set: BTreeMap<VertexId, Payload> = BTreeMap::new();
        for r in self.request(OpKind::Merge, blocks, b)? {
            match r {
                SlotData::Merged(parts) => {
                    for (id, p) in parts {
                        merge_into(self.program.as_ref(), &mut set, id, p)?;
                    }
                }
                other => return Err(unexpected(OpKind::Merge, &other)),
            }
        }
        Ok(MessageSet(set))
    }

    /// Apply of merged messages (or of every owned vertex, when the
    /// algorithm asks for it). Does not modify the tables.
    pub fn request_apply(&mut self, set: &MessageSet) -> Result<ApplyOutcome> {
        for &target in set.0.keys() {
            if !self.partition.owns(target) {
                return Err(Error::NotOwned {
                    vertex: target,
                    node: self.node_id,
                });
            }
        }
        let ids: Vec<VertexId> = if self.program.apply_to_all() {
            self.partition.vertices.keys().copied().collect()
        } else {
            set.0.keys().copied().collect()
        };
        let items: Vec<ApplyItem> = ids
            .into_iter()
            .map(|id| ApplyItem {
                id,
                old: self.partition.vertices.get(&id).map(|v| v.attr.clone()),
                msg: set.get(id).cloned(),
            })
            .collect();
        let b = self.block_size(items.len())?;
        let mut blocks = Vec::with_capacity(items.len().div_ceil(b));
        let mut rest = items.into_iter().peekable();
        while rest.peek().is_some() {
            blocks.push(SlotData::ApplyItems(rest.by_ref().take(b).collect()));
        }
        let mut out = ApplyOutcome::default();
        for r in self.request(OpKind::Apply, blocks, b)? {
            match r {
                SlotData::Applied(us) => {
                    for u in us {
                        absorb(&mut out, u);
                    }
                }
                other => return Err(unexpected(OpKind::Apply, &other)),
            }
        }
        Ok(out)
    }

    /// Writes an apply outcome into the local tables and advances the
    /// frontier.
    pub fn commit(&mut self, outcome: ApplyOutcome) -> Result<()> {
        apply_updates(&mut self.partition, &outcome.updates)?;
        for v in self.partition.vertices.values_mut() {
            v.active = outcome.next_active.contains(&v.id);
        }
        self.frontier = outcome.next_active;
        self.changed = outcome.changed;
        self.max_delta = outcome.max_delta;
        Ok(())
    }

    pub(crate) fn take_passes(&mut self) -> Vec<PassRecord> {
        std::mem::take(&mut self.passes)
    }
}

fn unexpected(op: OpKind, data: &SlotData) -> Error {
    Error::Protocol(format!("{op} pass returned unexpected content ({} items)", data.len()))
}

fn put_new(region: &SharedRegion, data: SlotData) -> Result<()> {
    let cap = region.capacity();
    if data.len() > cap {
        return Err(Error::CapacityExceeded {
            len: data.len(),
            capacity: cap,
        });
    }
    let mut slot = region.slot(Role::New)?;
    if !slot.is_empty() {
        return Err(Error::Protocol(format!(
            "region {}: New buffer still holds {} items",
            region.key(),
            slot.len()
        )));
    }
    *slot = data;
    Ok(())
}

fn take_upload(region: &SharedRegion) -> Result<Option<SlotData>> {
    let mut slot = region.slot(Role::Upload)?;
    if matches!(*slot, SlotData::Empty) {
        return Ok(None);
    }
    Ok(Some(std::mem::take(&mut *slot)))
}

/// Agent side of one pass on one region. After every rotation the previous
/// block's results are uploaded while the next block is downloaded, and the
/// next exchange is only signalled once both are done.
fn drive_pass(
    link: &DaemonEndpoint,
    op: OpKind,
    blocks: Vec<SlotData>,
    block_size: usize,
    seq: u64,
    cfg: &AgentConfig,
) -> Result<(Vec<SlotData>, Vec<StageCost>)> {
    let region = &link.region;
    for i in 0..3 {
        if !region.slot_at(i)?.is_empty() {
            return Err(Error::Protocol(format!(
                "region {}: buffer {i} not empty at pass start",
                region.key()
            )));
        }
    }
    region.set_op(op as u8);
    region.set_capacity(block_size);
    let costs: Vec<StageCost> = blocks
        .iter()
        .map(|b| {
            let n = b.len();
            StageCost {
                download: cfg.download_cost * n as f64,
                compute: link.profile.compute_cost(n),
                upload: cfg.upload_cost * n as f64,
            }
        })
        .collect();
    let mut queue = blocks.into_iter();
    let mut results = Vec::new();
    if let Some(first) = queue.next() {
        put_new(region, first)?;
    }
    region.send_to_daemon(ControlMessage::new(ControlKind::ExchangeFinished, seq))?;
    loop {
        let msg = region.recv_at_agent(cfg.reply_timeout)?;
        match msg.kind {
            ControlKind::RotateFinished => {
                let next = queue.next();
                let (up, down) = rayon::join(
                    || take_upload(region),
                    || match next {
                        Some(b) => put_new(region, b),
                        None => Ok(()),
                    },
                );
                if let Some(r) = up? {
                    results.push(r);
                }
                down?;
            }
            ControlKind::ComputeFinished => {
                region.send_to_daemon(ControlMessage::new(ControlKind::ExchangeFinished, seq))?;
            }
            ControlKind::ComputeAllFinished => break,
            ControlKind::Fault => {
                region.finish_pass();
                return Err(Error::Protocol(format!(
                    "daemon {} failed: {}",
                    region.key(),
                    msg.detail.unwrap_or_default()
                )));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "region {}: unexpected {other:?} from daemon",
                    region.key()
                )))
            }
        }
    }
    let trace = region.finish_pass();
    if !pass_trace_conforms(&trace) {
        return Err(Error::Protocol(format!(
            "region {}: pass trace {trace} violates the protocol",
            region.key()
        )));
    }
    Ok((results, costs))
}

//! The upper system: a small partitioned iterative engine. One thread per
//! node runs an agent; the coordinator provides barriers, the message
//! exchange, the authoritative store and the round queues.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, BlockPolicy, PassRecord};
use crate::algo::{AttributeValue, Message, VertexProgram};
use crate::balancer::{calibrate, even_split, Calibration, CalibrationSample};
use crate::daemon::{AcceleratorProfile, DaemonHost, DaemonReport};
use crate::error::{Error, Result};
use crate::graph::{partition_graph, Graph, OwnerMap, Partition, TripletBlock, VertexId};
use crate::metrics::{IterationRecord, NodeIterStats, RunMetrics, RunSummary, WallClock};
use crate::region::ChannelRegistry;
use crate::sync::{local_skip_vote, need_list, skip_check, AuthoritativeStore, CacheConfig, RoundLog, RoundQueues};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputationModel {
    /// Gen, Merge, Apply per superstep.
    Bsp,
    /// Merge and Apply of the previous step's messages, then Gen.
    Gas,
}

impl FromStr for ComputationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bsp" => Ok(ComputationModel::Bsp),
            "gas" => Ok(ComputationModel::Gas),
            other => Err(Error::Config(format!("unknown model {other:?} (expected bsp or gas)"))),
        }
    }
}

impl std::fmt::Display for ComputationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ComputationModel::Bsp => "bsp",
            ComputationModel::Gas => "gas",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub nodes: usize,
    /// Vertices per node, in id order. Even split when absent.
    pub partition_sizes: Option<Vec<usize>>,
    /// One profile shared by every node, or one per node.
    pub profiles: Vec<AcceleratorProfile>,
    pub daemons_per_node: usize,
    pub block_policy: BlockPolicy,
    pub download_cost: f64,
    pub upload_cost: f64,
    pub cache: Option<CacheConfig>,
    pub enable_skip: bool,
    /// Overrides the algorithm's own cap.
    pub max_iterations: Option<usize>,
    pub barrier_timeout: Duration,
    pub record_traces: bool,
    /// Collect round logs and count stale destination snapshots.
    pub audit: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let a = AgentConfig::default();
        EngineConfig {
            nodes: 1,
            partition_sizes: None,
            profiles: vec![AcceleratorProfile::cpu_like()],
            daemons_per_node: 1,
            block_policy: a.block_policy,
            download_cost: a.download_cost,
            upload_cost: a.upload_cost,
            cache: None,
            enable_skip: false,
            max_iterations: None,
            barrier_timeout: Duration::from_secs(60),
            record_traces: false,
            audit: false,
        }
    }
}

impl EngineConfig {
    fn profile_of(&self, node: usize) -> AcceleratorProfile {
        if self.profiles.len() == 1 {
            self.profiles[0]
        } else {
            self.profiles[node]
        }
    }

    fn validate(&self, vertex_count: usize) -> Result<Vec<usize>> {
        if self.nodes == 0 {
            return Err(Error::Config("at least one node is required".into()));
        }
        if self.daemons_per_node == 0 {
            return Err(Error::Config("at least one daemon per node is required".into()));
        }
        if self.profiles.len() != 1 && self.profiles.len() != self.nodes {
            return Err(Error::Config(format!(
                "{} profiles given for {} nodes",
                self.profiles.len(),
                self.nodes
            )));
        }
        if self.barrier_timeout.is_zero() {
            return Err(Error::Config("barrier timeout must be positive".into()));
        }
        match &self.partition_sizes {
            Some(s) if s.len() != self.nodes => Err(Error::Config(format!(
                "{} partition sizes given for {} nodes",
                s.len(),
                self.nodes
            ))),
            Some(s) => Ok(s.clone()),
            None => Ok(even_split(vertex_count as u64, self.nodes)
                .into_iter()
                .map(|x| x as usize)
                .collect()),
        }
    }
}

#[derive(Debug, Default)]
struct AbortFlag(Mutex<Option<String>>);

impl AbortFlag {
    fn raise(&self, why: String) {
        let mut g = self.0.lock().unwrap_or_else(|p| p.into_inner());
        g.get_or_insert(why);
    }

    fn reason(&self) -> Option<String> {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

struct GatherState<T> {
    generation: u64,
    slots: Vec<Option<T>>,
    arrived: usize,
    last: Option<Arc<Vec<T>>>,
}

/// Reusable all-gather barrier with a deadline. A node that misses the
/// deadline aborts the whole run instead of hanging it.
struct AllGather<T> {
    timeout: Duration,
    abort: Arc<AbortFlag>,
    state: Mutex<GatherState<T>>,
    cv: Condvar,
}

impl<T> AllGather<T> {
    fn new(nodes: usize, timeout: Duration, abort: Arc<AbortFlag>) -> Self {
        AllGather {
            timeout,
            abort,
            state: Mutex::new(GatherState {
                generation: 0,
                slots: (0..nodes).map(|_| None).collect(),
                arrived: 0,
                last: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn gather(&self, node: usize, label: &str, value: T) -> Result<Arc<Vec<T>>> {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(why) = self.abort.reason() {
            return Err(Error::Aborted(why));
        }
        if st.slots[node].is_some() {
            return Err(Error::Invariant(format!("node {node} entered {label} twice")));
        }
        st.slots[node] = Some(value);
        st.arrived += 1;
        if st.arrived == st.slots.len() {
            let all: Vec<T> = st.slots.iter_mut().map(|s| s.take().expect("arrived")).collect();
            let all = Arc::new(all);
            st.last = Some(all.clone());
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
            return Ok(all);
        }
        let generation = st.generation;
        let deadline = Instant::now() + self.timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                let stragglers: Vec<usize> = st
                    .slots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.is_none())
                    .map(|(i, _)| i)
                    .collect();
                self.abort
                    .raise(format!("barrier {label} timed out waiting for nodes {stragglers:?}"));
                self.cv.notify_all();
                return Err(Error::BarrierTimeout {
                    barrier: label.to_string(),
                    stragglers,
                });
            }
            let wait = (deadline - now).min(Duration::from_millis(50));
            st = self.cv.wait_timeout(st, wait).unwrap_or_else(|p| p.into_inner()).0;
            if st.generation != generation {
                return Ok(st.last.clone().expect("completed generation"));
            }
            if let Some(why) = self.abort.reason() {
                return Err(Error::Aborted(why));
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Vote {
    converged: bool,
    skip: bool,
}

struct Coordinator {
    nodes: usize,
    owner: OwnerMap,
    abort: Arc<AbortFlag>,
    store: AuthoritativeStore,
    queues: RoundQueues,
    votes: AllGather<Vote>,
    sync: AllGather<()>,
    /// inbox[dst][src]
    inbox: Mutex<Vec<Vec<Vec<Message>>>>,
    truth: Option<RwLock<HashMap<VertexId, AttributeValue>>>,
    round_logs: Mutex<Vec<RoundLog>>,
}

impl Coordinator {
    fn barrier(&self, node: usize, label: &str) -> Result<()> {
        self.sync.gather(node, label, ()).map(|_| ())
    }

    /// Delivers remote messages and returns the ones addressed to `node`,
    /// ordered by sender.
    fn exchange(&self, node: usize, outgoing: Vec<Vec<Message>>) -> Result<Vec<Message>> {
        {
            let mut ib = self.inbox.lock().unwrap_or_else(|p| p.into_inner());
            for (dst, msgs) in outgoing.into_iter().enumerate() {
                if dst != node && !msgs.is_empty() {
                    ib[dst][node] = msgs;
                }
            }
        }
        self.barrier(node, "exchange")?;
        let mut ib = self.inbox.lock().unwrap_or_else(|p| p.into_inner());
        Ok(ib[node].iter_mut().flat_map(std::mem::take).collect())
    }

    fn stale_in(&self, block: &TripletBlock) -> u64 {
        let Some(truth) = &self.truth else { return 0 };
        let truth = truth.read().unwrap_or_else(|p| p.into_inner());
        block
            .triplets
            .iter()
            .filter(|t| !truth.get(&t.edge.dst).is_some_and(|a| a.same_as(&t.dst_attr)))
            .count() as u64
    }

    fn record_truth(&self, partition: &Partition, changed: &std::collections::BTreeSet<VertexId>) {
        if let Some(truth) = &self.truth {
            let mut truth = truth.write().unwrap_or_else(|p| p.into_inner());
            for id in changed {
                truth.insert(*id, partition.vertices[id].attr.clone());
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub attributes: BTreeMap<VertexId, AttributeValue>,
    pub iterations: usize,
    pub converged: bool,
    pub metrics: RunMetrics,
    /// One entry per synchronization round, when auditing.
    pub round_logs: Vec<RoundLog>,
    pub daemon_reports: Vec<DaemonReport>,
}

struct NodeResult {
    partition: Partition,
    stats: Vec<NodeIterStats>,
    skipped: Vec<bool>,
    walls: Vec<u64>,
    converged: bool,
    flush_uploads: u64,
    reports: Vec<DaemonReport>,
}

/// Runs `program` on `graph` until convergence or the iteration cap.
pub fn run(
    graph: &Graph,
    program: Arc<dyn VertexProgram>,
    model: ComputationModel,
    cfg: &EngineConfig,
) -> Result<RunOutcome> {
    let sizes = cfg.validate(graph.vertex_count())?;
    let degrees = graph.out_degrees();
    let pg = partition_graph(graph, &sizes, |v| program.initial_attr(v, degrees[&v]))?;
    let initial: Vec<(VertexId, AttributeValue)> = pg
        .partitions
        .iter()
        .flat_map(|p| p.vertices.values().map(|v| (v.id, v.attr.clone())))
        .collect();
    let m = cfg.nodes;
    let abort = Arc::new(AbortFlag::default());
    let coord = Coordinator {
        nodes: m,
        owner: pg.vertex_owner.clone(),
        abort: abort.clone(),
        store: AuthoritativeStore::new(initial.iter().cloned()),
        queues: RoundQueues::new(m),
        votes: AllGather::new(m, cfg.barrier_timeout, abort.clone()),
        sync: AllGather::new(m, cfg.barrier_timeout, abort.clone()),
        inbox: Mutex::new(vec![vec![Vec::new(); m]; m]),
        truth: cfg.audit.then(|| RwLock::new(initial.into_iter().collect())),
        round_logs: Mutex::new(Vec::new()),
    };
    let cap = cfg
        .max_iterations
        .unwrap_or_else(|| program.max_iterations(graph.vertex_count()));
    let registry = ChannelRegistry::new();

    let results: Vec<Result<NodeResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = pg
            .partitions
            .into_iter()
            .map(|partition| {
                let node = partition.node_id;
                let program = program.clone();
                let registry = registry.clone();
                let coord = &coord;
                std::thread::Builder::new()
                    .name(format!("node{node}-agent"))
                    .spawn_scoped(s, move || {
                        let r = node_main(node, partition, program, model, cfg, cap, coord, registry);
                        if let Err(e) = &r {
                            if !matches!(e, Error::Aborted(_)) {
                                coord.abort.raise(format!("node {node}: {e}"));
                            }
                        }
                        r
                    })
                    .expect("spawning node thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Aborted("node thread panicked".into()))))
            .collect()
    });

    let mut nodes = Vec::with_capacity(m);
    let mut first_err: Option<Error> = None;
    for r in results {
        match r {
            Ok(n) => nodes.push(n),
            Err(e) => {
                let replace = match &first_err {
                    None => true,
                    Some(Error::Aborted(_)) => !matches!(e, Error::Aborted(_)),
                    Some(_) => false,
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let attributes = coord.store.snapshot();
    for n in &nodes {
        for v in n.partition.vertices.values() {
            if !attributes.get(&v.id).is_some_and(|a| a.same_as(&v.attr)) {
                return Err(Error::Invariant(format!(
                    "store holds a stale value for vertex {} after the final flush",
                    v.id
                )));
            }
        }
    }

    let iterations = nodes[0].stats.len();
    let converged = nodes[0].converged;
    let mut records = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let per_node: Vec<NodeIterStats> = nodes.iter().map(|n| n.stats[it].clone()).collect();
        records.push(IterationRecord::from_nodes(
            it,
            &model.to_string(),
            per_node,
            nodes[0].skipped[it],
            converged && it + 1 == iterations,
            WallClock {
                elapsed_us: nodes[0].walls[it],
            },
        ));
    }
    let skipped = nodes[0].skipped.iter().filter(|&&s| s).count();
    let daemon_reports: Vec<DaemonReport> = nodes.iter().flat_map(|n| n.reports.clone()).collect();
    let summary = RunSummary {
        algo: program.kind().to_string(),
        model: model.to_string(),
        nodes: m,
        partition_sizes: sizes,
        iterations,
        converged,
        iterations_skipped: skipped,
        sync_rounds: iterations - skipped - usize::from(converged),
        t_total: records.iter().map(|r| r.t_pipeline).sum(),
        final_flush_uploads: nodes.iter().map(|n| n.flush_uploads).sum(),
        daemons: daemon_reports.clone(),
    };
    let round_logs = std::mem::take(&mut *coord.round_logs.lock().unwrap_or_else(|p| p.into_inner()));
    Ok(RunOutcome {
        attributes,
        iterations,
        converged,
        metrics: RunMetrics { records, summary },
        round_logs,
        daemon_reports,
    })
}

/// Fits each node's cost per data unit from two short runs that differ only
/// in their fixed block size.
pub fn calibrate_nodes(
    graph: &Graph,
    program: Arc<dyn VertexProgram>,
    model: ComputationModel,
    cfg: &EngineConfig,
    block_sizes: [usize; 2],
    iterations: usize,
) -> Result<Vec<Calibration>> {
    if block_sizes[0] == block_sizes[1] {
        return Err(Error::UnderDetermined("calibration needs two different block sizes".into()));
    }
    let mut samples: Vec<Vec<CalibrationSample>> = vec![Vec::new(); cfg.nodes];
    for b in block_sizes {
        let probe = EngineConfig {
            block_policy: BlockPolicy::Fixed(b),
            max_iterations: Some(iterations),
            ..cfg.clone()
        };
        let out = run(graph, program.clone(), model, &probe)?;
        for r in &out.metrics.records {
            for n in &r.nodes {
                samples[n.node].push(CalibrationSample {
                    data_units: n.data_units as f64,
                    blocks: n.blocks as f64,
                    time: n.t_pipeline,
                });
            }
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(node, s)| {
            calibrate(s).map_err(|e| Error::UnderDetermined(format!("node {node}: {e}")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn node_main(
    node: usize,
    partition: Partition,
    program: Arc<dyn VertexProgram>,
    model: ComputationModel,
    cfg: &EngineConfig,
    cap: usize,
    coord: &Coordinator,
    registry: Arc<ChannelRegistry>,
) -> Result<NodeResult> {
    let profiles = vec![cfg.profile_of(node); cfg.daemons_per_node];
    let mut host = DaemonHost::start(node, &profiles, program.clone(), registry, 1, cfg.record_traces)?;
    let agent_cfg = AgentConfig {
        block_policy: cfg.block_policy,
        download_cost: cfg.download_cost,
        upload_cost: cfg.upload_cost,
        cache: cfg.cache,
        reply_timeout: cfg.barrier_timeout,
    };
    let mut agent = Agent::new(partition, program.clone(), agent_cfg)?;
    let mut out = NodeResult {
        partition: Partition::default(),
        stats: Vec::new(),
        skipped: Vec::new(),
        walls: Vec::new(),
        converged: false,
        flush_uploads: 0,
        reports: Vec::new(),
    };
    let looped = iterate(node, &mut agent, &host, &*program, model, cfg, cap, coord, &mut out);
    let reports = agent.shutdown(&mut host);
    looped?;
    out.reports = reports?;
    out.partition = agent.into_partition();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    node: usize,
    agent: &mut Agent,
    host: &DaemonHost,
    program: &dyn VertexProgram,
    model: ComputationModel,
    cfg: &EngineConfig,
    cap: usize,
    coord: &Coordinator,
    out: &mut NodeResult,
) -> Result<()> {
    let audit_fn = |b: &TripletBlock| coord.stale_in(b);
    let audit: Option<&dyn Fn(&TripletBlock) -> u64> =
        (cfg.audit && model == ComputationModel::Bsp).then_some(&audit_fn as _);
    let mut prev_skipped = false;
    let mut carried: Vec<Message> = Vec::new();
    for iter in 0..cap {
        let started = Instant::now();
        let mut st = NodeIterStats {
            node,
            data_units: agent.partition.vertices.len() as u64,
            ..NodeIterStats::default()
        };
        agent.connect(host)?;
        match model {
            ComputationModel::Bsp => {
                pull(agent, coord, &mut st)?;
                let (msgs, stale) = agent.request_gen(audit)?;
                st.stale_snapshots += stale;
                let inbox = exchange(node, msgs, prev_skipped, coord, &mut st)?;
                let set = agent.request_merge(inbox)?;
                let outcome = agent.request_apply(&set)?;
                agent.commit(outcome)?;
            }
            ComputationModel::Gas => {
                if iter == 0 {
                    pull(agent, coord, &mut st)?;
                    carried = agent.request_gen(None)?.0;
                }
                let inbox = exchange(node, std::mem::take(&mut carried), prev_skipped, coord, &mut st)?;
                let set = agent.request_merge(inbox)?;
                let outcome = agent.request_apply(&set)?;
                agent.commit(outcome)?;
                pull(agent, coord, &mut st)?;
                carried = agent.request_gen(None)?.0;
            }
        }
        agent.push();
        agent.disconnect()?;
        coord.record_truth(&agent.partition, &agent.changed);
        absorb_passes(&mut st, agent.take_passes());

        let vote = Vote {
            converged: program.converged(!agent.frontier.is_empty(), agent.max_delta),
            skip: cfg.enable_skip
                && local_skip_vote(&agent.boundary, &agent.changed, &agent.gen_frontier()),
        };
        let votes = coord.votes.gather(node, "vote", vote)?;
        let all_converged = votes.iter().all(|v| v.converged);
        let skip = skip_check(&votes.iter().map(|v| Some(v.skip)).collect::<Vec<_>>())?;
        let mut skipped = false;
        if !all_converged {
            if skip {
                skipped = true;
            } else {
                synchronize(node, iter as u64, agent, cfg, coord, &mut st)?;
            }
        }
        prev_skipped = skipped;
        if let Some(c) = agent.cache.as_mut() {
            c.decay_all();
        }
        out.stats.push(st);
        out.skipped.push(skipped);
        out.walls.push(started.elapsed().as_micros() as u64);
        if all_converged {
            out.converged = true;
            break;
        }
    }
    out.flush_uploads = flush(agent, coord)?;
    Ok(())
}

fn absorb_passes(st: &mut NodeIterStats, passes: Vec<PassRecord>) {
    for p in &passes {
        st.items += p.items as u64;
        st.blocks += p.blocks as u64;
        st.t_download += p.t_download;
        st.t_compute += p.t_compute;
        st.t_upload += p.t_upload;
        st.t_pipeline += p.t_pipeline;
    }
    st.passes = passes;
}

fn pull(agent: &mut Agent, coord: &Coordinator, st: &mut NodeIterStats) -> Result<()> {
    let p = agent.pull(&coord.store)?;
    st.cache_hits += p.hits;
    st.cache_misses += p.misses;
    st.downloads += p.downloads;
    Ok(())
}

/// Splits messages by owner, delivers the remote ones and returns what this
/// node must merge. After a skipped round nothing may cross nodes.
fn exchange(
    node: usize,
    msgs: Vec<Message>,
    prev_skipped: bool,
    coord: &Coordinator,
    st: &mut NodeIterStats,
) -> Result<Vec<Message>> {
    let mut buckets: Vec<Vec<Message>> = vec![Vec::new(); coord.nodes];
    for msg in msgs {
        let owner = coord
            .owner
            .owner(msg.target)
            .ok_or(Error::UnknownVertex(msg.target))?;
        buckets[owner].push(msg);
    }
    let local = std::mem::take(&mut buckets[node]);
    let remote: u64 = buckets.iter().map(|b| b.len() as u64).sum();
    st.messages_sent += remote;
    if prev_skipped || coord.nodes == 1 {
        if remote > 0 {
            return Err(Error::Invariant(format!(
                "node {node} produced {remote} remote messages after a skipped round"
            )));
        }
        return Ok(local);
    }
    let mut all = local;
    all.extend(coord.exchange(node, buckets)?);
    Ok(all)
}

/// One synchronization round: lazy uploading through the cache, or a plain
/// commit of every change when caching is off.
fn synchronize(
    node: usize,
    round: u64,
    agent: &mut Agent,
    cfg: &EngineConfig,
    coord: &Coordinator,
    st: &mut NodeIterStats,
) -> Result<()> {
    if agent.cache.is_none() {
        let staged = std::mem::take(&mut agent.staged);
        st.uploads += staged.len() as u64;
        for id in staged.keys() {
            agent.partition.vertices.get_mut(id).expect("staged owned vertex").updated = false;
        }
        coord.store.write(staged)?;
        return coord.barrier(node, "commit");
    }

    let need = need_list(&agent.partition, &agent.gen_frontier());
    coord.queues.publish(round, node, need.clone())?;
    coord.barrier(node, "publish")?;
    let gqq = coord.queues.gqq(round)?;

    let cache = agent.cache.as_mut().expect("cache path");
    let pending = cache.take_pending();
    st.writebacks += pending.len() as u64;
    for id in pending.keys() {
        if !cache.is_dirty(*id) {
            if let Some(v) = agent.partition.vertices.get_mut(id) {
                v.updated = false;
            }
        }
    }
    coord.store.write(pending)?;
    let dirty = cache.dirty_ids();
    let uploads: Vec<(VertexId, AttributeValue)> = dirty
        .iter()
        .filter(|id| gqq.contains(id))
        .map(|&id| (id, cache.entry(id).expect("dirty entry").attr))
        .collect();
    st.uploads += uploads.len() as u64;
    st.uploads_avoided += (dirty.len() - uploads.len()) as u64;
    for (id, version) in coord.store.write(uploads.iter().cloned())? {
        cache.mark_clean(id, version);
        agent.partition.vertices.get_mut(&id).expect("owned").updated = false;
    }
    coord.queues.upload(round, node, uploads)?;
    coord.barrier(node, "upload")?;

    if cfg.audit && node == 0 {
        if let Some(log) = coord.queues.log(round) {
            coord.round_logs.lock().unwrap_or_else(|p| p.into_inner()).push(log);
        }
    }
    for id in need {
        let (stored, version) = coord.store.get(id)?;
        let attr = coord.queues.fetch(round, id).unwrap_or(stored);
        cache.refresh(id, attr, version);
        st.downloads += 1;
    }
    Ok(())
}

/// Writes every value the store has not seen yet.
fn flush(agent: &mut Agent, coord: &Coordinator) -> Result<u64> {
    let mut items: BTreeMap<VertexId, AttributeValue> = std::mem::take(&mut agent.staged);
    if let Some(cache) = agent.cache.as_mut() {
        items.extend(cache.take_pending());
        for id in cache.dirty_ids() {
            let attr = cache.entry(id).expect("dirty entry").attr;
            items.insert(id, attr);
        }
    }
    let n = items.len() as u64;
    for (id, version) in coord.store.write(items)? {
        if let Some(c) = agent.cache.as_mut() {
            if c.is_dirty(id) {
                c.mark_clean(id, version);
            }
        }
        if let Some(v) = agent.partition.vertices.get_mut(&id) {
            v.updated = false;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algo::{run_reference, AlgoKind, Sssp};
    use crate::algo::program_for;
    use crate::graph::Edge;

    fn cycle(n: u64) -> Graph {
        Graph::from_edges((0..n).map(|i| Edge::new(i, (i + 1) % n, 1.0 + (i % 3) as f64)).collect())
    }

    #[test]
    fn single_node_matches_reference() {
        let g = cycle(20);
        for kind in [AlgoKind::Sssp, AlgoKind::PageRank, AlgoKind::Lp] {
            let p = program_for(kind, &g, None).unwrap();
            let want = run_reference(p.as_ref(), &g).unwrap();
            let got = run(&g, p.clone(), ComputationModel::Bsp, &EngineConfig::default()).unwrap();
            for (id, a) in &want.attributes {
                assert!(got.attributes[id].approx_eq(a, 1e-9), "{kind} {id}");
            }
            assert_eq!(got.converged, want.converged);
        }
    }

    #[test]
    fn barrier_times_out_with_stragglers() {
        let abort = Arc::new(AbortFlag::default());
        let g: AllGather<()> = AllGather::new(2, Duration::from_millis(30), abort.clone());
        match g.gather(0, "solo", ()) {
            Err(Error::BarrierTimeout { barrier, stragglers }) => {
                assert_eq!(barrier, "solo");
                assert_eq!(stragglers, vec![1]);
            }
            other => panic!("{other:?}"),
        }
        assert!(abort.reason().is_some());
    }

    #[test]
    fn gather_returns_all_values_in_node_order() {
        let abort = Arc::new(AbortFlag::default());
        let g: AllGather<usize> = AllGather::new(3, Duration::from_secs(5), abort);
        let got: Vec<Vec<usize>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..3)
                .map(|i| {
                    let g = &g;
                    s.spawn(move || g.gather(i, "t", i * 10).unwrap().to_vec())
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for v in got {
            assert_eq!(v, vec![0, 10, 20]);
        }
    }

    #[test]
    fn bad_config_is_rejected() {
        let g = cycle(4);
        let p: Arc<dyn VertexProgram> = Arc::new(Sssp::new(&[VertexId(0)]).unwrap());
        for cfg in [
            EngineConfig { nodes: 0, ..EngineConfig::default() },
            EngineConfig { daemons_per_node: 0, ..EngineConfig::default() },
            EngineConfig { nodes: 2, partition_sizes: Some(vec![4]), ..EngineConfig::default() },
            EngineConfig { nodes: 3, profiles: vec![AcceleratorProfile::cpu_like(); 2], ..EngineConfig::default() },
        ] {
            assert!(matches!(run(&g, p.clone(), ComputationModel::Bsp, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn model_names_parse() {
        assert_eq!("BSP".parse::<ComputationModel>().unwrap(), ComputationModel::Bsp);
        assert_eq!("gas".parse::<ComputationModel>().unwrap(), ComputationModel::Gas);
        assert!("x".parse::<ComputationModel>().is_err());
    }
}
